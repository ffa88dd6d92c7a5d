"""End-to-end protocol rounds and experiment sweeps.

A round walks every client through loss evaluation, top-k voting, local
noise and pairwise masking, then makes exactly one secure-summation call.
If contributions go missing the coordinator broadcasts ABORT and re-runs
the round once with the survivors, recomputing the noise denominator over
them. A second abort is a RoundFailureError.

Seed derivation (all through numpy SeedSequence):
    partition and dataset     config seed
    oracle losses             (config seed, repetition)
    round masks/noise/drops   (config seed, epsilon index, repetition)
so repetitions see the same losses at every epsilon.
"""

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import AbstractSet, Any, Optional, Sequence

import numpy as np

from accountant import NoiseCalibration, calibrate_sigma
from config import ExperimentConfig
from errors import ConfigError, InvalidParameterError, ReportError, RoundAbortError, RoundFailureError
from partition import (
    ClientShard,
    DirichletSpec,
    LossOracle,
    SeparatedGaussianOracle,
    TableOracle,
    dirichlet_partition,
    evaluate_losses,
    iid_partition,
    load_dataset_csv,
    make_synthetic_dataset,
)
from securesum import (
    FixedPointCodec,
    RoundTranscript,
    agree_pair_seeds,
    codec_for_noise,
    masked_contribution,
    pairwise_masks,
    secure_sum,
)
from transport import MemoryTransport, Transport, make_transport
from utility import GoodBadPartition, gap, utility_lower_bound, wilson_interval
from voting import (
    AggregateVotes,
    HyperparameterGrid,
    Objective,
    add_client_noise,
    aggregate_plain,
    noise_denominator,
    select_winner,
    top_k_votes,
)
from wire import (
    MessageType,
    RoundMessage,
    abort_message,
    aggregate_message,
    communication_cost,
    contribution_message,
    grid_announce_message,
    read_aggregate,
    read_contribution,
    read_grid_announce,
    read_seed_exchange,
    seed_exchange_message,
)

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("epsilon", "rep", "winner", "gamma", "bound", "success", "seed", "transcript_hash")
MAX_ATTEMPTS = 2


@dataclass(frozen=True)
class RoundResult:
    """Outcome of one protocol round.

    ``plain`` is the noise-free vote count of the final participants; the
    private protocol never reveals it, it is kept for test-mode reporting and
    gap computation.
    """

    winner: int
    transcript: RoundTranscript
    aggregate: AggregateVotes
    plain: AggregateVotes
    losses: np.ndarray
    participants: tuple[int, ...]
    n_effective: int

    @property
    def attempts(self) -> int:
        return self.transcript.attempt + 1


def _attempt_seeds(seed: int, attempt: int) -> tuple[int, int, np.random.Generator]:
    """(mask entropy, noise entropy, dropout rng) for one attempt."""
    mask_ss, noise_ss, drop_ss = np.random.SeedSequence(seed, spawn_key=(attempt,)).spawn(3)
    mask_entropy = int(mask_ss.generate_state(1, np.uint64)[0])
    noise_entropy = int(noise_ss.generate_state(1, np.uint64)[0])
    return mask_entropy, noise_entropy, np.random.default_rng(drop_ss)


def _exchange_seeds(participants: Sequence[int], mask_entropy: int) -> dict[tuple[int, int], int]:
    """Pairwise seed agreement, carried in SEED_EXCHANGE frames between peers."""
    agreed = agree_pair_seeds(participants, mask_entropy)
    received: dict[tuple[int, int], int] = {}
    for (i, j), seed in agreed.items():
        frame = seed_exchange_message(i, j, seed).encode()
        a, b, value = read_seed_exchange(RoundMessage.decode(frame))
        received[(a, b)] = value
    return received


class _RoundAttempt:
    """One secure-summation attempt over a fixed participant set."""

    def __init__(
        self,
        round_id: str,
        attempt: int,
        participants: Sequence[int],
        ballots: dict,
        grid: HyperparameterGrid,
        sigma: float,
        k: int,
        seed: int,
        transport: Transport,
        codec: FixedPointCodec,
        n_effective: int,
    ) -> None:
        self.logger = logging.getLogger(__name__)
        self.round_id = round_id
        self.attempt = attempt
        self.participants = tuple(participants)
        self.ballots = ballots
        self.grid = grid
        self.sigma = sigma
        self.k = k
        self.seed = seed
        self.transport = transport
        self.codec = codec
        self.n_effective = n_effective

    def run(
        self,
        forced: AbstractSet[int],
        dropout_rate: float,
        previous: Optional[RoundTranscript] = None,
    ) -> RoundTranscript:
        mask_entropy, noise_entropy, drop_rng = _attempt_seeds(self.seed, self.attempt)
        shared_seeds = _exchange_seeds(self.participants, mask_entropy)
        leaving = set(forced) & set(self.participants)
        if dropout_rate > 0.0:
            draws = drop_rng.random(len(self.participants))
            leaving |= {pid for pid, u in zip(self.participants, draws) if u < dropout_rate}

        self.transport.open(self.participants)
        announce = grid_announce_message(self.round_id, self.grid, self.k).encode()
        for pid, frame in self.transport.broadcast(announce).items():
            _, grid, k = read_grid_announce(RoundMessage.decode(frame))
            if grid.p != self.grid.p or k != self.k:
                raise InvalidParameterError("grid", grid.p, f"client {pid} received a different grid")

        clamped = 0
        for pid in self.participants:
            if pid in leaving:
                self.transport.hang_up(pid)
                continue
            rng = np.random.default_rng(np.random.SeedSequence(noise_entropy, spawn_key=(pid,)))
            noisy = add_client_noise(self.ballots[pid], self.sigma, self.n_effective, rng)
            clamped += int(np.count_nonzero(np.abs(noisy.values) > self.codec.clamp_range))
            masks = pairwise_masks(pid, self.participants, shared_seeds, self.grid.p, self.codec)
            ring = masked_contribution(noisy, masks, self.codec)
            self.transport.send(pid, contribution_message(ring).encode())

        received = self.transport.collect()
        contributions = {
            pid: read_contribution(RoundMessage.decode(frame)) if frame is not None else None
            for pid, frame in received.items()
        }
        frames = tuple(received[pid] for pid in self.participants if received[pid] is not None)
        delivered = {pid: c for pid, c in contributions.items() if c is not None}

        try:
            total = secure_sum(contributions, self.codec, self.participants, self.round_id)
        except RoundAbortError as e:
            abort = abort_message(self.round_id, e.dropouts).encode()
            self.transport.broadcast(abort)
            self.logger.warning(
                f"Round {self.round_id} attempt {self.attempt}: "
                f"{len(e.dropouts)} of {len(self.participants)} contribution(s) missing"
            )
            e.transcript = RoundTranscript(
                round_id=self.round_id,
                attempt=self.attempt,
                participants=self.participants,
                contributions=delivered,
                dropouts=e.dropouts,
                frames=frames + (abort,),
                n_effective=self.n_effective,
                clamped=clamped,
                previous=previous,
            )
            raise

        aggregate_frame = aggregate_message(total).encode()
        for pid, frame in self.transport.broadcast(aggregate_frame).items():
            echoed = read_aggregate(RoundMessage.decode(frame).expect(MessageType.AGGREGATE))
            if not np.array_equal(echoed, total):
                raise InvalidParameterError("aggregate", pid, "client received a different aggregate")

        return RoundTranscript(
            round_id=self.round_id,
            attempt=self.attempt,
            participants=self.participants,
            contributions=delivered,
            dropouts=frozenset(),
            frames=frames + (aggregate_frame,),
            aggregate=total,
            n_effective=self.n_effective,
            clamped=clamped,
            previous=previous,
        )


def run_round(
    shards: Sequence[ClientShard],
    oracle: LossOracle,
    grid: HyperparameterGrid,
    sigma: float,
    k: int,
    seed: int,
    *,
    loss_seed: Optional[int] = None,
    dropout_tolerance: float = 0.0,
    noncompliant: float = 0.0,
    dropout_rate: float = 0.0,
    forced_dropouts: Sequence[AbstractSet[int]] = (),
    transport: Optional[Transport] = None,
    codec: Optional[FixedPointCodec] = None,
    objective: Objective = "minimize",
    round_id: str = "r0",
) -> RoundResult:
    """Run one private selection round over ``shards``.

    ``forced_dropouts[a]`` names clients that leave during attempt ``a``;
    ``dropout_rate`` adds independent seeded departures on top.
    """
    if not shards:
        raise InvalidParameterError("shards", 0, "a round needs at least one client")
    ids = [s.client_id for s in shards]
    if len(set(ids)) != len(ids):
        raise InvalidParameterError("shards", ids, "client ids must be unique")
    transport = transport or MemoryTransport()
    loss_seed = seed if loss_seed is None else loss_seed

    losses = {s.client_id: evaluate_losses(oracle, s, grid, loss_seed) for s in shards}
    ballots = {pid: top_k_votes(loss, k, objective) for pid, loss in losses.items()}

    participants = tuple(sorted(ids))
    previous: Optional[RoundTranscript] = None
    first_abort: Optional[RoundAbortError] = None
    for attempt in range(MAX_ATTEMPTS):
        n_effective = noise_denominator(len(participants), dropout_tolerance, noncompliant)
        attempt_codec = codec or codec_for_noise(sigma / math.sqrt(n_effective))
        forced = forced_dropouts[attempt] if attempt < len(forced_dropouts) else frozenset()
        runner = _RoundAttempt(
            round_id, attempt, participants, ballots, grid, sigma, k, seed, transport, attempt_codec, n_effective
        )
        try:
            transcript = runner.run(forced, dropout_rate, previous)
        except RoundAbortError as e:
            previous = e.transcript
            participants = tuple(pid for pid in participants if pid not in e.dropouts)
            if first_abort is not None:
                raise RoundFailureError(round_id, first_abort, e) from e
            first_abort = e
            if not participants:
                raise RoundFailureError(round_id, e, RoundAbortError(round_id, ())) from e
            logger.info(f"Round {round_id}: re-running with {len(participants)} surviving client(s)")
            continue
        finally:
            transport.close()

        aggregate = AggregateVotes(values=transcript.aggregate, n_contributors=len(participants))
        winner = select_winner(aggregate)
        plain = aggregate_plain(ballots[pid] for pid in participants)
        loss_matrix = np.stack([losses[pid].values for pid in participants])
        logger.debug(
            f"Round {round_id}: winner {winner} after {attempt + 1} attempt(s), "
            f"n={len(participants)}, n_effective={n_effective}"
        )
        return RoundResult(
            winner=winner,
            transcript=transcript,
            aggregate=aggregate,
            plain=plain,
            losses=loss_matrix,
            participants=participants,
            n_effective=n_effective,
        )
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class RunRecord:
    """One (epsilon, repetition) cell of a sweep."""

    epsilon: float
    rep: int
    seed: int
    sigma: float
    private: bool
    winner: int
    opt: int
    gamma: float
    bound: Optional[float]
    success: bool
    transcript_hash: str
    attempts: int
    n_clients: int
    n_effective: int
    winner_loss: float
    opt_loss: float
    wall_clock: float = field(default=0.0, compare=False)
    plain_aggregate: Optional[tuple[float, ...]] = None


@dataclass(frozen=True)
class EpsilonSummary:
    epsilon: float
    sigma: float
    private: bool
    successes: int
    repetitions: int
    success_rate: float
    wilson_95_interval: tuple[float, float]
    opt_match_rate: float
    rand_guess: float
    mean_gamma: float


@dataclass
class RunReport:
    """Records in (epsilon, repetition) order plus per-epsilon summaries."""

    records: list[RunRecord]
    summaries: list[EpsilonSummary]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def record_count(self) -> int:
        return len(self.records)


def build_oracle(config: ExperimentConfig) -> LossOracle:
    if config.oracle == "table":
        try:
            oracle = TableOracle.from_csv(config.table_path, config.good_candidates())
        except (OSError, InvalidParameterError) as e:
            raise ConfigError(str(e), config.source, field="oracle.table") from e
        if config.n > oracle.n_clients:
            raise ConfigError(
                f"table has {oracle.n_clients} client rows, config asks for n={config.n}",
                config.source,
                field="n",
            )
        if oracle.matrix.shape[1] != config.p:
            raise ConfigError(
                f"table has {oracle.matrix.shape[1]} candidates, grid has p={config.p}",
                config.source,
                field="oracle.table",
            )
        return oracle
    return SeparatedGaussianOracle(
        good=config.good_candidates(),
        sigma_loss=config.sigma_loss,
        skew_weight=config.skew_weight,
        size_reference=config.size_reference,
    )


def build_shards(config: ExperimentConfig) -> list[ClientShard]:
    """Dataset and partition, both drawn once from the config seed."""
    if config.dataset_path is not None:
        try:
            dataset = load_dataset_csv(config.dataset_path, config.dataset_labels)
        except (OSError, InvalidParameterError) as e:
            raise ConfigError(str(e), config.source, field="dataset.path") from e
    else:
        dataset = make_synthetic_dataset(config.dataset_size, config.dataset_labels, config.seed)

    if config.partition == "dirichlet":
        return dirichlet_partition(dataset, DirichletSpec(config.alpha_dir, config.n, config.seed))
    return iid_partition(dataset, config.n, config.seed)


def participating_shards(shards: Sequence[ClientShard], policy: str) -> list[ClientShard]:
    """Apply the empty-shard policy: ``exclude`` drops them, ``prior`` keeps them."""
    if policy == "prior":
        return list(shards)
    kept = [s for s in shards if not s.is_empty]
    if len(kept) < len(shards):
        logger.warning(f"Excluding {len(shards) - len(kept)} client(s) with empty shards")
    if not kept:
        raise InvalidParameterError("shards", len(shards), "every shard is empty")
    return kept


def _optimum(losses: np.ndarray, objective: Objective) -> int:
    totals = losses.sum(axis=0)
    return int(np.argmax(totals) if objective == "maximize" else np.argmin(totals))


def _derive_seed(*words: int) -> int:
    return int(np.random.SeedSequence(list(words)).generate_state(1, np.uint32)[0])


def _run_cell(
    config: ExperimentConfig,
    shards: Sequence[ClientShard],
    oracle: LossOracle,
    calibration: NoiseCalibration,
    eps_index: int,
    rep: int,
) -> RunRecord:
    round_seed = _derive_seed(config.seed, eps_index, rep)
    loss_seed = _derive_seed(config.seed, rep)
    started = time.perf_counter()
    result = run_round(
        shards,
        oracle,
        config.grid,
        calibration.sigma,
        config.k,
        round_seed,
        loss_seed=loss_seed,
        dropout_tolerance=config.dropout_tolerance,
        noncompliant=config.noncompliant_fraction,
        dropout_rate=config.dropout_rate,
        transport=make_transport(config.transport),
        objective=config.objective,
        round_id=f"e{eps_index}-r{rep}",
    )
    elapsed = time.perf_counter() - started

    opt = _optimum(result.losses, config.objective)
    good = oracle.good_set(config.p)
    success = result.winner in good if good is not None else result.winner == opt
    partition = GoodBadPartition.complement(good if good is not None else {opt}, config.p)
    if partition.bad:
        gamma = gap(result.plain, partition)
        bound = utility_lower_bound(gamma, len(partition.bad), calibration.sigma).lower_bound
    else:
        gamma, bound = math.nan, 1.0
    global_loss = result.losses.mean(axis=0)

    return RunRecord(
        epsilon=calibration.budget.epsilon,
        rep=rep,
        seed=round_seed,
        sigma=calibration.sigma,
        private=calibration.budget.is_private,
        winner=result.winner,
        opt=opt,
        gamma=gamma,
        bound=bound,
        success=bool(success),
        transcript_hash=result.transcript.digest(),
        attempts=result.attempts,
        n_clients=len(result.participants),
        n_effective=result.n_effective,
        winner_loss=float(global_loss[result.winner]),
        opt_loss=float(global_loss[opt]),
        wall_clock=elapsed,
        plain_aggregate=tuple(float(v) for v in result.plain.values) if config.record_plain else None,
    )


def _summarize(
    config: ExperimentConfig,
    calibration: NoiseCalibration,
    records: Sequence[RunRecord],
    rand_guess: float,
) -> EpsilonSummary:
    successes = sum(1 for r in records if r.success)
    gammas = np.array([r.gamma for r in records], dtype=np.float64)
    return EpsilonSummary(
        epsilon=calibration.budget.epsilon,
        sigma=calibration.sigma,
        private=calibration.budget.is_private,
        successes=successes,
        repetitions=len(records),
        success_rate=successes / len(records),
        wilson_95_interval=wilson_interval(successes, len(records)),
        opt_match_rate=sum(1 for r in records if r.winner == r.opt) / len(records),
        rand_guess=rand_guess,
        mean_gamma=float(np.mean(gammas)) if not np.isnan(gammas).all() else math.nan,
    )


def run_experiment(config: ExperimentConfig) -> RunReport:
    """Sweep every epsilon x repetition; deterministic for a given seed."""
    logger.info(
        f"Experiment: p={config.p}, n={config.n}, k={config.k}, "
        f"epsilons={list(config.epsilons)}, repetitions={config.repetitions}, seed={config.seed}"
    )
    oracle = build_oracle(config)
    shards = participating_shards(build_shards(config), config.empty_shards)
    calibrations = [calibrate_sigma(budget, config.k) for budget in config.budgets()]

    good = oracle.good_set(config.p)
    if good is not None:
        rand_guess = len(good) / config.p
    else:
        table = np.stack([evaluate_losses(oracle, s, config.grid, config.seed).values for s in shards])
        rand_guess = float(table.mean())

    cells = [(e, rep) for e in range(len(calibrations)) for rep in range(config.repetitions)]

    def run(cell: tuple[int, int]) -> RunRecord:
        eps_index, rep = cell
        return _run_cell(config, shards, oracle, calibrations[eps_index], eps_index, rep)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(run, cells))
    else:
        records = [run(cell) for cell in cells]

    summaries = []
    for eps_index, calibration in enumerate(calibrations):
        block = records[eps_index * config.repetitions:(eps_index + 1) * config.repetitions]
        summary = _summarize(config, calibration, block, rand_guess)
        summaries.append(summary)
        low, high = summary.wilson_95_interval
        logger.info(
            f"epsilon={summary.epsilon:g} sigma={summary.sigma:.4g}: "
            f"success {summary.success_rate:.3f} [{low:.3f}, {high:.3f}]"
        )

    cost = communication_cost(config.p, len(shards))
    metadata = {
        "seed": config.seed,
        "p": config.p,
        "n": config.n,
        "n_participating": len(shards),
        "k": config.k,
        "delta": config.delta,
        "repetitions": config.repetitions,
        "partition": config.partition,
        "oracle": config.oracle,
        "transport": config.transport,
        "objective": config.objective,
        "bytes_per_client": cost.per_client_upload,
        "coordinator_ingress_bytes": cost.coordinator_ingress,
    }
    return RunReport(records=records, summaries=summaries, metadata=metadata)


def _csv_number(value: Optional[float]) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return "nan"
    return repr(float(value))


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return _csv_number(value)
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    return value


def _record_row(record: RunRecord) -> list[str]:
    return [
        _csv_number(record.epsilon),
        str(record.rep),
        str(record.winner),
        _csv_number(record.gamma),
        _csv_number(record.bound),
        "1" if record.success else "0",
        str(record.seed),
        record.transcript_hash,
    ]


def report_to_dict(report: RunReport) -> dict[str, Any]:
    def record_dict(r: RunRecord) -> dict[str, Any]:
        body = {
            "epsilon": r.epsilon,
            "rep": r.rep,
            "seed": r.seed,
            "sigma": r.sigma,
            "private": r.private,
            "winner": r.winner,
            "opt": r.opt,
            "gamma": r.gamma,
            "bound": r.bound,
            "success": r.success,
            "transcript_hash": r.transcript_hash,
            "attempts": r.attempts,
            "n_clients": r.n_clients,
            "n_effective": r.n_effective,
            "winner_loss": r.winner_loss,
            "opt_loss": r.opt_loss,
            "wall_clock_seconds": r.wall_clock,
        }
        if r.plain_aggregate is not None:
            body["plain_aggregate"] = list(r.plain_aggregate)
        return body

    def summary_dict(s: EpsilonSummary) -> dict[str, Any]:
        return {
            "epsilon": s.epsilon,
            "sigma": s.sigma,
            "private": s.private,
            "successes": s.successes,
            "repetitions": s.repetitions,
            "success_rate": s.success_rate,
            "wilson_95_interval": list(s.wilson_95_interval),
            "opt_match_rate": s.opt_match_rate,
            "rand_guess": s.rand_guess,
            "mean_gamma": s.mean_gamma,
        }

    return _json_safe({
        "schema_version": REPORT_SCHEMA_VERSION,
        "metadata": report.metadata,
        "records": [record_dict(r) for r in report.records],
        "summary": [summary_dict(s) for s in report.summaries],
    })


def emit_report(report: RunReport, fmt: str, path: Path) -> None:
    """Write ``report`` as CSV (fixed columns) or versioned JSON."""
    path = Path(path)
    if fmt not in ("csv", "json"):
        raise InvalidParameterError("format", fmt, "expected csv or json")
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            if fmt == "csv":
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(CSV_COLUMNS)
                for record in report.records:
                    writer.writerow(_record_row(record))
            else:
                json.dump(report_to_dict(report), f, indent=2, sort_keys=True, allow_nan=False)
                f.write("\n")
    except OSError as e:
        raise ReportError(path, e) from e
    logger.info(f"Wrote {fmt} report with {report.record_count} record(s) to {path}")
