"""Client and server steps of the private top-k vote.

Clients rank the public candidate list by local loss, cast one equally
weighted vote for each of their k best candidates, and perturb the ballot
with their share of the Gaussian noise. The coordinator sums the noisy
ballots and picks the candidate with the most votes.
"""

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Literal, Mapping, Sequence

import numpy as np

from errors import InvalidParameterError

logger = logging.getLogger(__name__)

Objective = Literal["minimize", "maximize"]

# Default demo grid: 10 learning rates x 5 decays x 2 momenta = 100 candidates.
DEFAULT_GRID_PARAMS: dict[str, list[float]] = {
    "learning_rate": [0.5, 0.1, 0.05, 1e-3, 5e-3, 1e-5, 1e-6, 5e-6, 5e-7, 1e-7],
    "lr_decay": [0.0, 0.1, 0.25, 0.99, 1.0],
    "momentum": [0.0, 0.9],
}


@dataclass(frozen=True)
class HyperparameterGrid:
    """Public, ordered list of hyperparameter candidates.

    The index of a candidate identifies it for the whole run; descriptors
    themselves need not be unique.
    """

    candidates: tuple[Mapping[str, Any], ...]

    def __post_init__(self) -> None:
        if len(self.candidates) < 1:
            raise InvalidParameterError("candidates", len(self.candidates), "grid needs p >= 1")

    @property
    def p(self) -> int:
        return len(self.candidates)

    def __len__(self) -> int:
        return len(self.candidates)

    def __getitem__(self, index: int) -> Mapping[str, Any]:
        return self.candidates[index]

    @classmethod
    def cross_product(cls, params: Mapping[str, Sequence[Any]]) -> "HyperparameterGrid":
        """Expand per-parameter value lists in declaration order."""
        if not params:
            raise InvalidParameterError("params", params, "cross product needs >= 1 parameter")
        names = list(params)
        for name in names:
            if len(params[name]) == 0:
                raise InvalidParameterError(name, params[name], "parameter has no values")
        candidates = tuple(
            dict(zip(names, values))
            for values in itertools.product(*(params[name] for name in names))
        )
        return cls(candidates)

    @classmethod
    def anonymous(cls, p: int) -> "HyperparameterGrid":
        """Grid of ``p`` opaque candidates named H0..H{p-1}."""
        if p < 1:
            raise InvalidParameterError("p", p, "grid needs p >= 1")
        return cls(tuple({"name": f"H{j}"} for j in range(p)))

    @classmethod
    def default(cls) -> "HyperparameterGrid":
        return cls.cross_product(DEFAULT_GRID_PARAMS)

    def to_json(self) -> str:
        return json.dumps([dict(c) for c in self.candidates], sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HyperparameterGrid":
        return cls(tuple(json.loads(text)))


@dataclass(frozen=True)
class LossVector:
    """Local losses of one client, one finite value per candidate."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise InvalidParameterError("losses", values.shape, "expected a non-empty vector")
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise InvalidParameterError(
                "losses", values[bad[0]], f"non-finite loss at candidate {int(bad[0])}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def p(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class VoteVector:
    """Binary top-k ballot with exactly ``k`` ones."""

    bits: np.ndarray
    k: int

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=np.int64)
        if bits.ndim != 1:
            raise InvalidParameterError("bits", bits.shape, "ballot must be a vector")
        if not np.isin(bits, (0, 1)).all():
            raise InvalidParameterError("bits", bits.tolist(), "ballot entries must be 0 or 1")
        if not 1 <= self.k <= bits.size:
            raise InvalidParameterError("k", self.k, f"must satisfy 1 <= k <= p={bits.size}")
        if int(bits.sum()) != self.k:
            raise InvalidParameterError("bits", int(bits.sum()), f"ballot must hold exactly k={self.k} votes")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def p(self) -> int:
        return int(self.bits.size)


@dataclass(frozen=True)
class NoisyVoteVector:
    """A ballot after the client added its noise share."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def p(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class AggregateVotes:
    """Coordinate-wise vote sum over ``n_contributors`` ballots."""

    values: np.ndarray
    n_contributors: int = field(default=1)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise InvalidParameterError("aggregate", values.shape, "expected a non-empty vector")
        if self.n_contributors < 1:
            raise InvalidParameterError("n_contributors", self.n_contributors, "must be >= 1")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def p(self) -> int:
        return int(self.values.size)


def _check_k(k: int, p: int) -> None:
    if k < 1:
        raise InvalidParameterError("k", k, "number of votes must be >= 1")
    if k > p:
        raise InvalidParameterError("k", k, f"cannot cast more votes than candidates (p={p})")


def _ranking(scores: np.ndarray, objective: Objective) -> np.ndarray:
    # Stable sort: equal scores keep index order, so ties go to the lowest index.
    if objective == "minimize":
        return np.argsort(scores, axis=-1, kind="stable")
    if objective == "maximize":
        return np.argsort(-scores, axis=-1, kind="stable")
    raise InvalidParameterError("objective", objective, "expected 'minimize' or 'maximize'")


def top_k_votes(losses: LossVector, k: int, objective: Objective = "minimize") -> VoteVector:
    """Vote for the ``k`` best candidates (lowest loss by default)."""
    _check_k(k, losses.p)
    bits = np.zeros(losses.p, dtype=np.int64)
    bits[_ranking(losses.values, objective)[:k]] = 1
    return VoteVector(bits=bits, k=k)


def noise_denominator(n: int, dropout_tolerance: float = 0.0, noncompliant: float = 0.0) -> int:
    """Number of noise shares each client assumes will reach the sum.

    With tolerance xi for dropouts and a fraction mu of clients that may skip
    noising, each client scales its share for ceil((1 - xi - mu) * n)
    contributors, so the delivered noise still has variance >= sigma^2.
    """
    if n < 1:
        raise InvalidParameterError("n", n, "need at least one client")
    if not 0.0 <= dropout_tolerance < 1.0:
        raise InvalidParameterError("dropout_tolerance", dropout_tolerance, "must lie in [0, 1)")
    if not 0.0 <= noncompliant < 1.0:
        raise InvalidParameterError("noncompliant", noncompliant, "must lie in [0, 1)")
    if dropout_tolerance + noncompliant >= 1.0:
        raise InvalidParameterError(
            "dropout_tolerance", dropout_tolerance, "dropout and non-compliant fractions must sum below 1"
        )
    reliable = (1.0 - dropout_tolerance - noncompliant) * n
    # Round before ceil so 0.8 * 10 stays 8 instead of 8.000000000000002.
    return max(1, math.ceil(round(reliable, 9)))


def add_client_noise(
    votes: VoteVector,
    sigma_total: float,
    n_effective: int,
    rng: np.random.Generator,
) -> NoisyVoteVector:
    """Add an N(0, sigma_total^2 / n_effective) share to every coordinate."""
    if sigma_total < 0.0 or math.isnan(sigma_total):
        raise InvalidParameterError("sigma_total", sigma_total, "must be >= 0")
    if n_effective < 1:
        raise InvalidParameterError("n_effective", n_effective, "must be >= 1")
    values = votes.bits.astype(np.float64)
    if sigma_total > 0.0:
        values = values + rng.normal(0.0, sigma_total / math.sqrt(n_effective), size=votes.p)
    return NoisyVoteVector(values)


def aggregate_plain(ballots: Iterable[VoteVector]) -> AggregateVotes:
    """Noise-free vote counts. Never revealed by the private protocol."""
    ballots = list(ballots)
    if not ballots:
        raise InvalidParameterError("ballots", ballots, "need at least one ballot")
    p = ballots[0].p
    if any(b.p != p for b in ballots):
        raise InvalidParameterError("ballots", [b.p for b in ballots], "ballots differ in length")
    counts = np.sum([b.bits for b in ballots], axis=0, dtype=np.int64)
    return AggregateVotes(values=counts.astype(np.float64), n_contributors=len(ballots))


def aggregate_noisy(ballots: Iterable[NoisyVoteVector]) -> AggregateVotes:
    """Plain float sum of noisy ballots (reference for the secure sum)."""
    ballots = list(ballots)
    if not ballots:
        raise InvalidParameterError("ballots", ballots, "need at least one ballot")
    return AggregateVotes(
        values=np.sum([b.values for b in ballots], axis=0), n_contributors=len(ballots)
    )


def select_winner(aggregate: AggregateVotes) -> int:
    """Index of the candidate with the most votes; ties go to the lowest index."""
    return int(np.argmax(aggregate.values))


def ballot_matrix(losses: np.ndarray, k: int, objective: Objective = "minimize") -> np.ndarray:
    """Top-k ballots for a whole population at once.

    ``losses`` has shape (n, p); row i equals ``top_k_votes`` of client i.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 2:
        raise InvalidParameterError("losses", losses.shape, "expected an (n, p) matrix")
    _check_k(k, losses.shape[1])
    chosen = _ranking(losses, objective)[:, :k]
    bits = np.zeros(losses.shape, dtype=np.int64)
    np.put_along_axis(bits, chosen, 1, axis=1)
    return bits


def client_noise_matrix(
    n: int,
    p: int,
    sigma_total: float,
    n_effective: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-client noise shares, shape (n, p), each N(0, sigma_total^2 / n_effective)."""
    if sigma_total < 0.0:
        raise InvalidParameterError("sigma_total", sigma_total, "must be >= 0")
    if n_effective < 1:
        raise InvalidParameterError("n_effective", n_effective, "must be >= 1")
    if sigma_total == 0.0:
        return np.zeros((n, p))
    return rng.normal(0.0, sigma_total / math.sqrt(n_effective), size=(n, p))
