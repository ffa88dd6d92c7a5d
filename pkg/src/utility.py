"""Utility analysis: vote gap, success-probability bound, Monte-Carlo estimates.

If the plain vote counts separate the good candidates from the bad ones by a
gap gamma > 0, the noisy argmax picks a good candidate with probability at
least

    1 - |H_bad| * sigma / (gamma * sqrt(pi)) * exp(-gamma^2 / (4 sigma^2))

where sigma is the standard deviation of the total aggregate noise per
coordinate. The Monte-Carlo harness runs the full vote -> noise -> sum ->
argmax pipeline on synthetic losses (good candidates centred at 0, bad at 1)
to estimate the real success rate.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from scipy import stats

from accountant import PrivacyBudget, calibrate_sigma
from errors import InvalidParameterError
from voting import (
    AggregateVotes,
    Objective,
    ballot_matrix,
    client_noise_matrix,
    noise_denominator,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GoodBadPartition:
    """Candidates with good utility and the ones counted against them."""

    good: frozenset[int]
    bad: frozenset[int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "good", frozenset(self.good))
        object.__setattr__(self, "bad", frozenset(self.bad))
        if not self.good:
            raise InvalidParameterError("good", sorted(self.good), "good set must be non-empty")
        if self.good & self.bad:
            raise InvalidParameterError("bad", sorted(self.good & self.bad), "good and bad sets overlap")

    @classmethod
    def complement(cls, good: Iterable[int], p: int) -> "GoodBadPartition":
        good = frozenset(good)
        return cls(good=good, bad=frozenset(range(p)) - good)

    @classmethod
    def leading(cls, good_count: int, p: int) -> "GoodBadPartition":
        """The first ``good_count`` candidates are the good ones."""
        if not 1 <= good_count <= p:
            raise InvalidParameterError("good_count", good_count, f"must lie in [1, p={p}]")
        return cls.complement(range(good_count), p)

    def check(self, p: int) -> None:
        out_of_range = [i for i in self.good | self.bad if not 0 <= i < p]
        if out_of_range:
            raise InvalidParameterError("partition", out_of_range, f"indices outside [0, {p})")


def gap(plain_aggregate: AggregateVotes, partition: GoodBadPartition) -> float:
    """Fewest votes on a good candidate minus most votes on a bad one."""
    partition.check(plain_aggregate.p)
    if not partition.bad:
        raise InvalidParameterError("bad", [], "gap needs a non-empty bad set")
    values = plain_aggregate.values
    return float(values[sorted(partition.good)].min() - values[sorted(partition.bad)].max())


@dataclass(frozen=True)
class UtilityBound:
    """Lower bound on the chance of selecting a good candidate.

    ``raw_bound`` is the closed form (may be negative, i.e. vacuous);
    ``lower_bound`` is it clamped to [0, 1]. Both are None when the gap is
    not positive, since the bound only holds for separated votes.
    """

    gamma: float
    h_bad_count: int
    sigma: float
    raw_bound: Optional[float]

    @property
    def applicable(self) -> bool:
        return self.raw_bound is not None

    @property
    def lower_bound(self) -> Optional[float]:
        if self.raw_bound is None:
            return None
        return min(1.0, max(0.0, self.raw_bound))

    @property
    def vacuous(self) -> bool:
        return self.raw_bound is not None and self.raw_bound <= 0.0


def utility_lower_bound(gamma: float, h_bad_count: int, sigma: float) -> UtilityBound:
    if h_bad_count < 1:
        raise InvalidParameterError("h_bad_count", h_bad_count, "must be >= 1")
    if sigma < 0 or math.isnan(sigma):
        raise InvalidParameterError("sigma", sigma, "must be >= 0")
    if not gamma > 0:
        return UtilityBound(gamma=gamma, h_bad_count=h_bad_count, sigma=sigma, raw_bound=None)
    if sigma == 0.0:
        return UtilityBound(gamma=gamma, h_bad_count=h_bad_count, sigma=sigma, raw_bound=1.0)

    raw = 1.0 - (h_bad_count * sigma) / (gamma * math.sqrt(math.pi)) * math.exp(-gamma**2 / (4.0 * sigma**2))
    bound = UtilityBound(gamma=gamma, h_bad_count=h_bad_count, sigma=sigma, raw_bound=raw)
    if bound.vacuous:
        logger.debug(f"Bound is vacuous for gamma={gamma:g}, |H_bad|={h_bad_count}, sigma={sigma:g} (raw {raw:.4g})")
    return bound


def pairwise_tail_probability(gamma: float, sigma: float) -> float:
    """Exact P[z_i - z_j >= gamma] for independent N(0, sigma^2) noise."""
    return float(stats.norm.sf(gamma, scale=math.sqrt(2.0) * sigma))


def random_guess_baseline(partition: GoodBadPartition, p: int) -> float:
    """Chance that a uniformly random candidate is good."""
    partition.check(p)
    return len(partition.good) / p


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(successes, trials).proportion_ci(confidence_level=confidence, method="wilson")
    rate = successes / trials
    return max(0.0, min(float(ci.low), rate)), min(1.0, max(float(ci.high), rate))


@dataclass(frozen=True)
class SimulationConfig:
    """One Monte-Carlo scenario; candidates 0..good_count-1 are the good ones."""

    p: int
    good_count: int
    n: int
    k: int
    sigma_loss: float
    repetitions: int
    budget: PrivacyBudget
    seed: int = 0
    dropout_tolerance: float = 0.0
    objective: Objective = "minimize"
    workers: int = 1

    def __post_init__(self) -> None:
        if self.p < 1:
            raise InvalidParameterError("p", self.p, "must be >= 1")
        if not 1 <= self.good_count <= self.p:
            raise InvalidParameterError("good_count", self.good_count, f"must lie in [1, p={self.p}]")
        if not 1 <= self.k <= self.p:
            raise InvalidParameterError("k", self.k, f"must lie in [1, p={self.p}]")
        if self.n < 1:
            raise InvalidParameterError("n", self.n, "must be >= 1")
        if self.repetitions < 1:
            raise InvalidParameterError("repetitions", self.repetitions, "must be >= 1")
        if self.sigma_loss < 0:
            raise InvalidParameterError("sigma_loss", self.sigma_loss, "must be >= 0")
        if self.workers < 1:
            raise InvalidParameterError("workers", self.workers, "must be >= 1")

    @property
    def partition(self) -> GoodBadPartition:
        return GoodBadPartition.leading(self.good_count, self.p)


@dataclass(frozen=True)
class SimulationResult:
    success_rate: float
    wilson_95_interval: tuple[float, float]
    mean_gamma: float
    successes: int
    repetitions: int
    sigma: float
    random_guess: float
    config: Optional[SimulationConfig] = field(default=None, compare=False)


def _simulate_once(
    config: SimulationConfig,
    sigma: float,
    n_effective: int,
    seed: np.random.SeedSequence,
) -> tuple[bool, float]:
    rng = np.random.default_rng(seed)
    good_mean, bad_mean = (0.0, 1.0) if config.objective == "minimize" else (1.0, 0.0)
    means = np.full(config.p, bad_mean)
    means[: config.good_count] = good_mean
    losses = means + config.sigma_loss * rng.standard_normal((config.n, config.p))

    ballots = ballot_matrix(losses, config.k, config.objective)
    noise = client_noise_matrix(config.n, config.p, sigma, n_effective, rng)
    noisy_sum = (ballots + noise).sum(axis=0)
    winner = int(np.argmax(noisy_sum))

    plain = ballots.sum(axis=0)
    if config.good_count < config.p:
        gamma = float(plain[: config.good_count].min() - plain[config.good_count:].max())
    else:
        gamma = float("nan")
    return winner < config.good_count, gamma


def simulate_success_rate(config: SimulationConfig) -> SimulationResult:
    """Fraction of repetitions whose noisy winner is a good candidate."""
    calibration = calibrate_sigma(config.budget, config.k)
    n_effective = noise_denominator(config.n, config.dropout_tolerance)
    child_seeds = np.random.SeedSequence(config.seed).spawn(config.repetitions)

    def run(seed: np.random.SeedSequence) -> tuple[bool, float]:
        return _simulate_once(config, calibration.sigma, n_effective, seed)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(run, child_seeds))
    else:
        outcomes = [run(s) for s in child_seeds]

    successes = sum(1 for ok, _ in outcomes if ok)
    gammas = np.array([g for _, g in outcomes])
    mean_gamma = float(np.mean(gammas)) if not np.isnan(gammas).all() else float("nan")
    rate = successes / config.repetitions

    logger.info(
        f"p={config.p} good={config.good_count} n={config.n} k={config.k} "
        f"sigma_loss={config.sigma_loss} epsilon={config.budget.epsilon}: "
        f"success {rate:.4f} over {config.repetitions} repetitions"
    )
    return SimulationResult(
        success_rate=rate,
        wilson_95_interval=wilson_interval(successes, config.repetitions),
        mean_gamma=mean_gamma,
        successes=successes,
        repetitions=config.repetitions,
        sigma=calibration.sigma,
        random_guess=random_guess_baseline(config.partition, config.p),
        config=config,
    )


def sweep_success_rates(
    base: SimulationConfig,
    ks: Sequence[int],
    epsilons: Sequence[float],
    good_counts: Sequence[int],
    sigma_losses: Sequence[float],
) -> Iterator[SimulationResult]:
    """Cartesian sweep over k, epsilon, |H_good| and sigma_loss."""
    for k, epsilon, good_count, sigma_loss in itertools.product(ks, epsilons, good_counts, sigma_losses):
        config = replace(
            base,
            k=k,
            budget=PrivacyBudget(epsilon, base.budget.delta),
            good_count=good_count,
            sigma_loss=sigma_loss,
        )
        yield simulate_success_rate(config)
