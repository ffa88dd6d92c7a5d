"""Simulated secure vector summation by pairwise additive masking.

Each participant encodes its noisy ballot as fixed-point elements of the
ring Z/2^ring_bits and adds one pseudo-random mask per peer: participant i
adds PRG(seed_ij) for every peer j > i and subtracts it for every j < i.
Summed over the full participant set all masks cancel, so the coordinator
learns the aggregate and nothing else about individual contributions.

Honest-but-curious only. There is no mask recovery: a missing contribution
aborts the round and the caller re-runs with the survivors.

Mask PRG: Philox4x64-10 keyed with the 128-bit pair seed, counter starting
at zero, raw 64-bit outputs in order (``numpy.random.Philox(key=seed)``).
"""

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from errors import InvalidParameterError, ProtocolSetupError, RoundAbortError
from voting import NoisyVoteVector

logger = logging.getLogger(__name__)

PairSeeds = Mapping[tuple[int, int], int]


@dataclass(frozen=True)
class FixedPointCodec:
    """Fixed-point encoding of reals into Z/2^ring_bits (two's complement)."""

    fractional_bits: int = 20
    ring_bits: int = 64
    clamp_range: float = 64.0
    max_participants: int = 100_000

    def __post_init__(self) -> None:
        if not 8 <= self.fractional_bits <= 40:
            raise InvalidParameterError("fractional_bits", self.fractional_bits, "must lie in [8, 40]")
        if not self.fractional_bits < self.ring_bits <= 64:
            raise InvalidParameterError("ring_bits", self.ring_bits, "must exceed fractional_bits and be <= 64")
        if not self.clamp_range > 0:
            raise InvalidParameterError("clamp_range", self.clamp_range, "must be > 0")
        if not self.max_encodable > self.clamp_range * self.max_participants:
            raise InvalidParameterError(
                "clamp_range",
                self.clamp_range,
                f"aggregate of {self.max_participants} clamped values could wrap the ring",
            )

    @property
    def modulus(self) -> int:
        return 1 << self.ring_bits

    @property
    def max_encodable(self) -> float:
        return ((1 << (self.ring_bits - 1)) - 1) / (1 << self.fractional_bits)

    @property
    def resolution(self) -> float:
        return 2.0 ** -self.fractional_bits

    @property
    def ring_mask(self) -> np.uint64:
        return np.uint64(self.modulus - 1)

    def encode_vector(self, values: np.ndarray) -> tuple[np.ndarray, int]:
        """Round-to-nearest encoding; returns (ring elements, clamped count)."""
        values = np.asarray(values, dtype=np.float64)
        clamped = int(np.count_nonzero(np.abs(values) > self.clamp_range))
        scaled = np.rint(np.clip(values, -self.clamp_range, self.clamp_range) * (1 << self.fractional_bits))
        ring = scaled.astype(np.int64).view(np.uint64) & self.ring_mask
        return ring, clamped

    def decode_vector(self, ring: np.ndarray) -> np.ndarray:
        ring = np.asarray(ring, dtype=np.uint64) & self.ring_mask
        if self.ring_bits == 64:
            signed = ring.view(np.int64)
        else:
            signed = ring.astype(np.int64)
            signed = np.where(signed >= (1 << (self.ring_bits - 1)), signed - self.modulus, signed)
        return signed.astype(np.float64) / (1 << self.fractional_bits)

    def encode(self, value: float) -> int:
        ring, clamped = self.encode_vector(np.array([value]))
        if clamped:
            logger.warning(f"Clamped {value!r} to +/-{self.clamp_range}")
        return int(ring[0])

    def decode(self, element: int) -> float:
        return float(self.decode_vector(np.array([element % self.modulus], dtype=np.uint64))[0])


def codec_for_noise(share_std: float, base: Optional[FixedPointCodec] = None) -> FixedPointCodec:
    """Codec whose clamp range covers ten standard deviations of a noise share."""
    base = base or FixedPointCodec()
    needed = 1.0 + 10.0 * share_std
    if needed <= base.clamp_range:
        return base
    return replace(base, clamp_range=needed)


def agree_pair_seeds(participants: Sequence[int], round_entropy: int) -> dict[tuple[int, int], int]:
    """Stand-in for pairwise key agreement: one 128-bit seed per unordered pair.

    Seeds depend only on the round entropy and the pair, so a round replays
    bit-identically.
    """
    seeds: dict[tuple[int, int], int] = {}
    ordered = sorted(participants)
    for a_pos, i in enumerate(ordered):
        for j in ordered[a_pos + 1:]:
            words = np.random.SeedSequence(round_entropy, spawn_key=(i, j)).generate_state(2, np.uint64)
            seeds[(i, j)] = (int(words[0]) << 64) | int(words[1])
    return seeds


def mask_stream(seed: int, p: int, codec: FixedPointCodec) -> np.ndarray:
    """First ``p`` ring elements of the Philox stream keyed by ``seed``."""
    return np.random.Philox(key=seed).random_raw(p).astype(np.uint64) & codec.ring_mask


def pairwise_masks(
    participant: int,
    others: Sequence[int],
    shared_seeds: PairSeeds,
    p: int,
    codec: FixedPointCodec,
) -> np.ndarray:
    """Net mask of ``participant``: +PRG for higher peers, -PRG for lower peers."""
    total = np.zeros(p, dtype=np.uint64)
    for other in others:
        if other == participant:
            continue
        pair = (min(participant, other), max(participant, other))
        seed = shared_seeds.get(pair)
        if seed is None:
            raise ProtocolSetupError("Missing shared seed", pair=pair)
        stream = mask_stream(seed, p, codec)
        if participant < other:
            total += stream
        else:
            total -= stream
    return total & codec.ring_mask


def masked_contribution(
    noisy_votes: NoisyVoteVector,
    masks: np.ndarray,
    codec: FixedPointCodec,
) -> np.ndarray:
    """Encode a noisy ballot and add its mask modulo the ring."""
    if masks.shape != (noisy_votes.p,):
        raise InvalidParameterError("masks", masks.shape, f"expected length {noisy_votes.p}")
    encoded, clamped = codec.encode_vector(noisy_votes.values)
    if clamped:
        logger.warning(f"Clamped {clamped} coordinate(s) to +/-{codec.clamp_range} before masking")
    return (encoded + np.asarray(masks, dtype=np.uint64)) & codec.ring_mask


def secure_sum(
    contributions: Mapping[int, Optional[np.ndarray]],
    codec: FixedPointCodec,
    participants: Optional[Sequence[int]] = None,
    round_id: str = "",
) -> np.ndarray:
    """Sum masked contributions modulo the ring and decode the aggregate.

    Raises RoundAbortError when any expected participant did not deliver.
    """
    expected = set(participants) if participants is not None else set(contributions)
    delivered = {pid for pid, c in contributions.items() if c is not None}
    missing = expected - delivered
    if missing:
        raise RoundAbortError(round_id, missing)
    if not delivered:
        raise InvalidParameterError("contributions", contributions, "nothing to sum")

    stacked = np.stack([contributions[pid] for pid in sorted(expected)]).astype(np.uint64)
    total = np.sum(stacked, axis=0, dtype=np.uint64) & codec.ring_mask
    return codec.decode_vector(total)


@dataclass(frozen=True)
class RoundTranscript:
    """Everything exchanged in one secure-summation attempt.

    ``frames`` holds the contribution frames in participant order followed by
    the aggregate frame (absent when the attempt aborted).
    """

    round_id: str
    attempt: int
    participants: tuple[int, ...]
    contributions: Mapping[int, np.ndarray]
    dropouts: frozenset[int]
    frames: tuple[bytes, ...]
    aggregate: Optional[np.ndarray] = None
    n_effective: int = 0
    clamped: int = 0
    previous: Optional["RoundTranscript"] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.aggregate is not None and self.dropouts:
            raise InvalidParameterError(
                "aggregate", self.round_id, "aborted attempts cannot carry an aggregate"
            )

    @property
    def completed(self) -> bool:
        return self.aggregate is not None

    @property
    def message_count(self) -> int:
        return len(self.frames)

    def digest(self) -> str:
        """SHA-256 over every frame of this attempt and of any aborted predecessor."""
        h = hashlib.sha256()
        if self.previous is not None:
            h.update(bytes.fromhex(self.previous.digest()))
        for frame in self.frames:
            h.update(len(frame).to_bytes(4, "little"))
            h.update(frame)
        return h.hexdigest()
