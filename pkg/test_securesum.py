"""Tests for fixed-point encoding and masked secure summation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from errors import InvalidParameterError, ProtocolSetupError, RoundAbortError
from securesum import (
    FixedPointCodec,
    RoundTranscript,
    agree_pair_seeds,
    codec_for_noise,
    mask_stream,
    masked_contribution,
    pairwise_masks,
    secure_sum,
)
from voting import NoisyVoteVector

CODEC = FixedPointCodec()


def _masked_round(values: np.ndarray, entropy: int) -> dict[int, np.ndarray]:
    participants = list(range(values.shape[0]))
    seeds = agree_pair_seeds(participants, entropy)
    return {
        pid: masked_contribution(
            NoisyVoteVector(values[pid]),
            pairwise_masks(pid, participants, seeds, values.shape[1], CODEC),
            CODEC,
        )
        for pid in participants
    }


def test_codec_examples():
    assert CODEC.decode(CODEC.encode(1.25)) == 1.25
    assert CODEC.encode(0.0) == 0
    assert abs(CODEC.decode(CODEC.encode(0.1)) - 0.1) <= 2.0 ** -20


def test_codec_negative_values_wrap_to_top_of_ring():
    assert CODEC.encode(-1.0) == CODEC.modulus - (1 << 20)
    assert CODEC.decode(CODEC.encode(-3.5)) == -3.5


def test_codec_clamps_out_of_range_values():
    ring, clamped = CODEC.encode_vector(np.array([100.0, -100.0, 1.0]))
    assert clamped == 2
    assert CODEC.decode_vector(ring).tolist() == [64.0, -64.0, 1.0]


def test_codec_for_noise_widens_clamp_only_when_needed():
    assert codec_for_noise(2.0) == CODEC
    wide = codec_for_noise(48.0)
    assert wide.clamp_range == 481.0
    assert wide.fractional_bits == CODEC.fractional_bits
    assert wide.decode(wide.encode(-300.5)) == -300.5


def test_codec_rejects_ring_too_small_for_population():
    with pytest.raises(InvalidParameterError):
        FixedPointCodec(fractional_bits=20, ring_bits=32, clamp_range=64.0, max_participants=100_000)


def test_two_party_masks_cancel():
    seeds = agree_pair_seeds([0, 1], 123)
    m0 = pairwise_masks(0, [0, 1], seeds, 4, CODEC)
    m1 = pairwise_masks(1, [0, 1], seeds, 4, CODEC)
    assert ((m0 + m1) & CODEC.ring_mask).tolist() == [0, 0, 0, 0]
    assert m0.any()


def test_five_party_masks_sum_to_zero():
    participants = [0, 1, 2, 3, 4]
    seeds = agree_pair_seeds(participants, 99)
    total = np.zeros(3, dtype=np.uint64)
    for pid in participants:
        total += pairwise_masks(pid, participants, seeds, 3, CODEC)
    assert (total & CODEC.ring_mask).tolist() == [0, 0, 0]


def test_single_participant_has_zero_mask():
    assert pairwise_masks(7, [7], {}, 5, CODEC).tolist() == [0] * 5


def test_missing_pair_seed_is_a_setup_error():
    seeds = agree_pair_seeds([0, 1], 5)
    with pytest.raises(ProtocolSetupError) as excinfo:
        pairwise_masks(0, [0, 1, 2], seeds, 2, CODEC)
    assert excinfo.value.pair == (0, 2)


def test_pair_seeds_are_deterministic_and_distinct():
    a = agree_pair_seeds([0, 1, 2], 17)
    assert a == agree_pair_seeds([2, 0, 1], 17)
    assert len(set(a.values())) == 3
    assert a != agree_pair_seeds([0, 1, 2], 18)


def test_mask_stream_matches_philox_output():
    seed = (1 << 100) + 12345
    expected = np.random.Philox(key=seed).random_raw(6).astype(np.uint64)
    assert mask_stream(seed, 6, CODEC).tolist() == expected.tolist()


def test_masked_contribution_with_zero_masks_is_plain_encoding():
    noisy = NoisyVoteVector(np.array([1.0, -0.5, 2.25]))
    masked = masked_contribution(noisy, np.zeros(3, dtype=np.uint64), CODEC)
    assert masked.tolist() == CODEC.encode_vector(noisy.values)[0].tolist()


def test_removing_own_masks_recovers_encoding():
    noisy = NoisyVoteVector(np.array([0.5, 3.0]))
    masks = np.array([12345678901234, 2**63 + 5], dtype=np.uint64)
    masked = masked_contribution(noisy, masks, CODEC)
    recovered = (masked - masks) & CODEC.ring_mask
    assert recovered.tolist() == CODEC.encode_vector(noisy.values)[0].tolist()


def test_secure_sum_of_integer_ballots_is_exact():
    values = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    total = secure_sum(_masked_round(values, 1), CODEC)
    assert total.tolist() == [2.0, 2.0]


def test_secure_sum_of_one_hundred_noisy_vectors():
    rng = np.random.default_rng(0)
    values = rng.normal(0.5, 3.0, size=(100, 8))
    total = secure_sum(_masked_round(values, 2), CODEC)
    assert np.max(np.abs(total - values.sum(axis=0))) <= 100 * 2.0 ** -20


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 64), st.integers(1, 128), st.integers(0, 2**32 - 1))
def test_secure_sum_matches_plain_sum(n, p, seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, 5.0, size=(n, p))
    participants = list(range(n))
    seeds = agree_pair_seeds(participants, seed)

    mask_total = np.zeros(p, dtype=np.uint64)
    for pid in participants:
        mask_total += pairwise_masks(pid, participants, seeds, p, CODEC)
    assert not (mask_total & CODEC.ring_mask).any()

    total = secure_sum(_masked_round(values, seed), CODEC)
    assert np.max(np.abs(total - values.sum(axis=0))) <= n * 2.0 ** -20


def test_masked_contributions_look_uniform():
    """Byte frequencies of what the coordinator sees are flat."""
    values = np.zeros((200, 64))
    values[:, 0] = 1.0
    contributions = _masked_round(values, 2024)
    data = np.concatenate([c.astype("<u8").view(np.uint8) for c in contributions.values()])
    counts = np.bincount(data, minlength=256)
    assert stats.chisquare(counts).pvalue > 1e-4


def test_missing_contribution_aborts_with_dropout_set():
    contributions = _masked_round(np.ones((4, 2)), 3)
    contributions[2] = None
    with pytest.raises(RoundAbortError) as excinfo:
        secure_sum(contributions, CODEC, participants=[0, 1, 2, 3], round_id="r9")
    assert excinfo.value.dropouts == frozenset({2})
    assert excinfo.value.round_id == "r9"


def test_secure_sum_notices_participants_that_never_reported():
    contributions = _masked_round(np.ones((3, 2)), 4)
    with pytest.raises(RoundAbortError) as excinfo:
        secure_sum(contributions, CODEC, participants=[0, 1, 2, 5])
    assert excinfo.value.dropouts == frozenset({5})


def test_aborted_transcript_cannot_carry_aggregate():
    with pytest.raises(InvalidParameterError):
        RoundTranscript(
            round_id="r", attempt=0, participants=(0, 1), contributions={},
            dropouts=frozenset({1}), frames=(), aggregate=np.zeros(2),
        )


def test_transcript_digest_chains_previous_attempt():
    aborted = RoundTranscript(
        round_id="r", attempt=0, participants=(0, 1), contributions={},
        dropouts=frozenset({1}), frames=(b"a",),
    )
    first = RoundTranscript(
        round_id="r", attempt=1, participants=(0,), contributions={},
        dropouts=frozenset(), frames=(b"b", b"c"), aggregate=np.zeros(1),
    )
    chained = RoundTranscript(
        round_id="r", attempt=1, participants=(0,), contributions={},
        dropouts=frozenset(), frames=(b"b", b"c"), aggregate=np.zeros(1), previous=aborted,
    )
    assert first.digest() != chained.digest()
    assert first.message_count == 2
    assert chained.completed and not aborted.completed
    # Length prefixes keep frame boundaries in the hash.
    split = RoundTranscript(
        round_id="r", attempt=1, participants=(0,), contributions={},
        dropouts=frozenset(), frames=(b"bc",), aggregate=np.zeros(1),
    )
    assert split.digest() != first.digest()
