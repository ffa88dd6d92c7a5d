"""Synthetic client populations and local loss oracles.

A labelled synthetic dataset is split across n clients either iid (seeded
shuffle, then round-robin) or non-iid with per-label Dirichlet proportions.
Loss oracles stand in for local training: they map (shard, candidate) to a
finite local loss deterministically under a seed.
"""

import csv
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from errors import InvalidParameterError, OracleError
from voting import HyperparameterGrid, LossVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticDataset:
    """Items as parallel arrays of feature ids and labels in [0, n_labels)."""

    ids: np.ndarray
    labels: np.ndarray
    n_labels: int

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if ids.shape != labels.shape or ids.ndim != 1:
            raise InvalidParameterError("labels", labels.shape, "ids and labels must be equal-length vectors")
        if self.n_labels < 1:
            raise InvalidParameterError("n_labels", self.n_labels, "must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_labels):
            raise InvalidParameterError("labels", int(labels.max()), f"labels must lie in [0, {self.n_labels})")
        ids.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.size)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_labels)


def make_synthetic_dataset(size: int, n_labels: int, seed: int) -> SyntheticDataset:
    """Balanced dataset: label counts differ by at most one, order shuffled."""
    if size < 1:
        raise InvalidParameterError("size", size, "dataset needs at least one item")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(size) % n_labels)
    return SyntheticDataset(ids=np.arange(size), labels=labels, n_labels=n_labels)


def load_dataset_csv(path: Path, n_labels: Optional[int] = None) -> SyntheticDataset:
    """Read ``id,label`` rows (an optional header row is skipped)."""
    ids: list[int] = []
    labels: list[int] = []
    with open(path, newline="", encoding="utf-8") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#"):
                continue
            if line_no == 1 and not row[0].strip().lstrip("-").isdigit():
                continue
            try:
                ids.append(int(row[0]))
                labels.append(int(row[1]))
            except (IndexError, ValueError) as e:
                raise InvalidParameterError("dataset", f"{path}:{line_no}", f"expected 'id,label': {e}") from e
    if n_labels is None:
        n_labels = (max(labels) + 1) if labels else 1
    logger.info(f"Loaded {len(ids)} items with {n_labels} labels from {path}")
    return SyntheticDataset(ids=np.array(ids), labels=np.array(labels), n_labels=n_labels)


@dataclass(frozen=True)
class ClientShard:
    """Item indices (into the dataset) held by one client."""

    client_id: int
    indices: np.ndarray
    label_histogram: np.ndarray

    @property
    def size(self) -> int:
        return int(self.indices.size)

    @property
    def is_empty(self) -> bool:
        return self.indices.size == 0


def _make_shard(client_id: int, indices: np.ndarray, dataset: SyntheticDataset) -> ClientShard:
    indices = np.sort(np.asarray(indices, dtype=np.int64))
    histogram = np.bincount(dataset.labels[indices], minlength=dataset.n_labels)
    indices.setflags(write=False)
    histogram.setflags(write=False)
    return ClientShard(client_id=client_id, indices=indices, label_histogram=histogram)


def label_skew(shard: ClientShard) -> float:
    """Normalised share of the shard's dominant label: 0 balanced, 1 single-label."""
    n_labels = shard.label_histogram.size
    if shard.is_empty or n_labels < 2:
        return 0.0
    top_share = shard.label_histogram.max() / shard.size
    return float((top_share - 1.0 / n_labels) / (1.0 - 1.0 / n_labels))


def iid_partition(dataset: SyntheticDataset, n: int, seed: int) -> list[ClientShard]:
    """Seeded uniform shuffle dealt round-robin; shard sizes differ by <= 1."""
    if n < 1:
        raise InvalidParameterError("n", n, "need at least one client")
    if n > len(dataset):
        raise InvalidParameterError("n", n, f"more clients than items ({len(dataset)})")
    order = np.random.default_rng(seed).permutation(len(dataset))
    return [_make_shard(i, order[i::n], dataset) for i in range(n)]


@dataclass(frozen=True)
class DirichletSpec:
    """Per-label Dirichlet(alpha_dir * 1_n) split.

    ``alpha_dir`` is the concentration parameter; small values give highly
    skewed shards. Not to be confused with the Renyi order.
    """

    alpha_dir: float
    n: int
    seed: int

    def __post_init__(self) -> None:
        if not self.alpha_dir > 0:
            raise InvalidParameterError("alpha_dir", self.alpha_dir, "concentration must be > 0")
        if self.n < 1:
            raise InvalidParameterError("n", self.n, "need at least one client")


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; leftovers go to the largest remainders."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    leftover = total - int(counts.sum())
    if leftover > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:leftover]] += 1
    return counts


def dirichlet_partition(dataset: SyntheticDataset, spec: DirichletSpec) -> list[ClientShard]:
    """Assign each label's shuffled items by Dirichlet-drawn client proportions.

    Proportions are normalised Gamma(alpha_dir, 1) draws; every label has its
    own child seed so labels can be drawn independently. Shards are disjoint
    and together cover the dataset; empty shards are possible for small
    ``alpha_dir``.
    """
    label_seeds = np.random.SeedSequence(spec.seed).spawn(dataset.n_labels)
    assigned: list[list[np.ndarray]] = [[] for _ in range(spec.n)]

    for label in range(dataset.n_labels):
        rng = np.random.default_rng(label_seeds[label])
        items = rng.permutation(np.flatnonzero(dataset.labels == label))
        if items.size == 0:
            continue
        draws = rng.standard_gamma(spec.alpha_dir, size=spec.n)
        total = draws.sum()
        if total > 0 and math.isfinite(total):
            proportions = draws / total
        else:
            # Every draw underflowed: the whole label goes to one client.
            proportions = np.zeros(spec.n)
            proportions[rng.integers(spec.n)] = 1.0
        counts = largest_remainder(proportions, items.size)
        for client, chunk in enumerate(np.split(items, np.cumsum(counts)[:-1])):
            assigned[client].append(chunk)

    shards = [
        _make_shard(i, np.concatenate(parts) if parts else np.empty(0, dtype=np.int64), dataset)
        for i, parts in enumerate(assigned)
    ]
    empty = sum(s.is_empty for s in shards)
    if empty:
        logger.debug(f"Dirichlet split (alpha={spec.alpha_dir}) left {empty} of {spec.n} shards empty")
    return shards


class LossOracle(ABC):
    """Deterministic map (shard, candidate, seed) -> finite local loss."""

    name = "abstract"

    @abstractmethod
    def losses(self, shard: ClientShard, p: int, seed: int) -> np.ndarray:
        """Losses for all ``p`` candidates of one shard."""

    def good_set(self, p: int) -> Optional[frozenset[int]]:
        """Declared good candidates, if the oracle defines them."""
        return None


class SeparatedGaussianOracle(LossOracle):
    """Good candidates draw N(good_mean, s^2), bad ones N(bad_mean, s^2).

    The per-shard spread s is ``sigma_loss`` widened by label skew
    (factor 1 + skew_weight * skew) and, when ``size_reference`` is set,
    by sqrt(size_reference / shard size) so small shards are noisier.
    Draws are iid across candidates and clients.
    """

    name = "separated-gaussian"

    def __init__(
        self,
        good: Iterable[int],
        sigma_loss: float,
        skew_weight: float = 1.0,
        size_reference: Optional[int] = None,
        good_mean: float = 0.0,
        bad_mean: float = 1.0,
    ) -> None:
        self.good = frozenset(int(g) for g in good)
        if not self.good:
            raise InvalidParameterError("good", sorted(self.good), "need at least one good candidate")
        if sigma_loss < 0:
            raise InvalidParameterError("sigma_loss", sigma_loss, "must be >= 0")
        if skew_weight < 0:
            raise InvalidParameterError("skew_weight", skew_weight, "must be >= 0")
        if size_reference is not None and size_reference < 1:
            raise InvalidParameterError("size_reference", size_reference, "must be >= 1")
        self.sigma_loss = sigma_loss
        self.skew_weight = skew_weight
        self.size_reference = size_reference
        self.good_mean = good_mean
        self.bad_mean = bad_mean

    def spread(self, shard: ClientShard) -> float:
        spread = self.sigma_loss * (1.0 + self.skew_weight * label_skew(shard))
        if self.size_reference is not None:
            spread *= math.sqrt(self.size_reference / max(shard.size, 1))
        return spread

    def means(self, p: int) -> np.ndarray:
        if max(self.good) >= p:
            raise InvalidParameterError("good", max(self.good), f"good candidate outside grid of p={p}")
        means = np.full(p, self.bad_mean)
        means[sorted(self.good)] = self.good_mean
        return means

    def losses(self, shard: ClientShard, p: int, seed: int) -> np.ndarray:
        means = self.means(p)
        spread = self.spread(shard)
        if spread == 0.0:
            return means
        rng = np.random.default_rng([seed, shard.client_id])
        return means + rng.normal(0.0, spread, size=p)

    def good_set(self, p: int) -> Optional[frozenset[int]]:
        return self.good


class TableOracle(LossOracle):
    """Explicit per-client loss matrix (rows = clients, columns = candidates)."""

    name = "table"

    def __init__(
        self,
        matrix: Sequence[Sequence[float]],
        names: Optional[Sequence[str]] = None,
        good: Optional[Iterable[int]] = None,
    ) -> None:
        self.matrix = np.asarray(matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise InvalidParameterError("matrix", self.matrix.shape, "expected a (clients, candidates) table")
        self.names = list(names) if names is not None else [f"H{j}" for j in range(self.matrix.shape[1])]
        self.good = frozenset(int(g) for g in good) if good is not None else None
        if self.good is not None:
            p = self.matrix.shape[1]
            if not self.good or not all(0 <= g < p for g in self.good):
                raise InvalidParameterError("good", sorted(self.good), f"need good candidates in [0, {p})")

    @classmethod
    def from_csv(cls, path: Path, good: Optional[Iterable[int]] = None) -> "TableOracle":
        """Header row of candidate names, one row per client.

        A leading ``client`` column is allowed; rows are then placed by id.
        """
        with open(path, newline="", encoding="utf-8") as f:
            rows = [row for row in csv.reader(f) if row and not row[0].startswith("#")]
        if len(rows) < 2:
            raise InvalidParameterError("table", str(path), "needs a header row and at least one client row")
        header, body = rows[0], rows[1:]
        keyed = header[0].strip().lower() == "client"
        names = header[1:] if keyed else header
        matrix = np.zeros((len(body), len(names)))
        seen: set[int] = set()
        try:
            for line_no, row in enumerate(body, start=2):
                if len(row) != len(header):
                    raise ValueError(f"line {line_no}: expected {len(header)} cells, got {len(row)}")
                client = int(row[0]) if keyed else line_no - 2
                if not 0 <= client < len(body):
                    raise ValueError(f"line {line_no}: client id {client} out of range")
                if client in seen:
                    raise ValueError(f"line {line_no}: duplicate client id {client}")
                seen.add(client)
                matrix[client] = [float(v) for v in (row[1:] if keyed else row)]
        except ValueError as e:
            raise InvalidParameterError("table", str(path), str(e)) from e
        logger.info(f"Loaded loss table {path}: {matrix.shape[0]} clients x {matrix.shape[1]} candidates")
        return cls(matrix, names, good)

    @property
    def n_clients(self) -> int:
        return int(self.matrix.shape[0])

    def losses(self, shard: ClientShard, p: int, seed: int) -> np.ndarray:
        if not 0 <= shard.client_id < self.n_clients:
            raise InvalidParameterError("client_id", shard.client_id, f"table has {self.n_clients} rows")
        if self.matrix.shape[1] != p:
            raise InvalidParameterError("p", p, f"table has {self.matrix.shape[1]} candidates")
        return self.matrix[shard.client_id].copy()

    def good_set(self, p: int) -> Optional[frozenset[int]]:
        return self.good


def evaluate_losses(
    oracle: LossOracle,
    shard: ClientShard,
    grid: HyperparameterGrid,
    seed: int,
) -> LossVector:
    """Local loss of every grid candidate on one shard."""
    values = np.asarray(oracle.losses(shard, grid.p, seed), dtype=np.float64)
    if values.shape != (grid.p,):
        raise InvalidParameterError("losses", values.shape, f"oracle must return {grid.p} values")
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise OracleError(shard.client_id, int(bad[0]), float(values[bad[0]]))
    return LossVector(values)
