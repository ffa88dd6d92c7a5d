"""Tests for top-k ballots, client noise and winner selection."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from errors import InvalidParameterError
from voting import (
    AggregateVotes,
    HyperparameterGrid,
    LossVector,
    VoteVector,
    add_client_noise,
    aggregate_noisy,
    aggregate_plain,
    ballot_matrix,
    client_noise_matrix,
    noise_denominator,
    select_winner,
    top_k_votes,
)


def test_default_grid_has_one_hundred_candidates():
    grid = HyperparameterGrid.default()
    assert grid.p == 10 * 5 * 2
    assert grid[0] == {"learning_rate": 0.5, "lr_decay": 0.0, "momentum": 0.0}


def test_cross_product_size_is_product_of_counts():
    grid = HyperparameterGrid.cross_product({"a": [1, 2, 3], "b": ["x", "y"], "c": [0.1]})
    assert grid.p == 6
    assert grid[1] == {"a": 1, "b": "y", "c": 0.1}


def test_grid_json_round_trip_keeps_order():
    grid = HyperparameterGrid.cross_product({"lr": [0.1, 0.01], "momentum": [0.0, 0.9]})
    assert HyperparameterGrid.from_json(grid.to_json()) == grid


def test_anonymous_grid():
    grid = HyperparameterGrid.anonymous(3)
    assert [c["name"] for c in grid.candidates] == ["H0", "H1", "H2"]
    with pytest.raises(InvalidParameterError):
        HyperparameterGrid.anonymous(0)


@pytest.mark.parametrize(
    "losses, k, expected",
    [
        ([0.3, 0.1, 0.5, 0.2], 2, [0, 1, 0, 1]),
        ([0.7, 0.7, 0.7], 1, [1, 0, 0]),
        ([5, 4, 3, 2], 4, [1, 1, 1, 1]),
    ],
)
def test_top_k_votes_examples(losses, k, expected):
    ballot = top_k_votes(LossVector(np.array(losses)), k)
    assert ballot.bits.tolist() == expected
    assert ballot.k == k


def test_top_k_votes_maximize_picks_largest_scores():
    ballot = top_k_votes(LossVector(np.array([0.3, 0.9, 0.5, 0.9])), 2, objective="maximize")
    assert ballot.bits.tolist() == [0, 1, 0, 1]


def test_top_k_votes_rejects_k_above_p():
    with pytest.raises(InvalidParameterError):
        top_k_votes(LossVector(np.array([1.0, 2.0])), 3)


def test_loss_vector_rejects_non_finite():
    with pytest.raises(InvalidParameterError):
        LossVector(np.array([0.1, np.nan]))


def test_vote_vector_requires_exactly_k_ones():
    with pytest.raises(InvalidParameterError):
        VoteVector(bits=np.array([1, 1, 0]), k=1)
    with pytest.raises(InvalidParameterError):
        VoteVector(bits=np.array([2, 0, 0]), k=2)


@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 12)),
               elements=st.floats(-10, 10, allow_nan=False)),
    st.data(),
)
def test_ballot_matrix_matches_per_client_ballots(losses, data):
    k = data.draw(st.integers(1, losses.shape[1]))
    matrix = ballot_matrix(losses, k)
    for row, client_losses in zip(matrix, losses):
        assert row.tolist() == top_k_votes(LossVector(client_losses), k).bits.tolist()
    assert (matrix.sum(axis=1) == k).all()


def test_sensitivity_brute_force_over_neighbouring_ballots():
    """Replacing one client's ballot moves the aggregate by at most sqrt(2k)."""
    for p in range(1, 7):
        for k in range(1, min(3, p) + 1):
            ballots = []
            for chosen in itertools.combinations(range(p), k):
                bits = np.zeros(p, dtype=np.int64)
                bits[list(chosen)] = 1
                ballots.append(VoteVector(bits=bits, k=k))
            for n in range(1, 4):
                others = [ballots[i % len(ballots)] for i in range(n - 1)]
                largest = 0
                for a, b in itertools.product(ballots, repeat=2):
                    diff = aggregate_plain(others + [a]).values - aggregate_plain(others + [b]).values
                    largest = max(largest, int(np.dot(diff, diff)))
                assert largest == 2 * min(k, p - k)
                if 2 * k <= p:
                    assert largest == 2 * k


def test_noise_denominator():
    assert noise_denominator(10) == 10
    assert noise_denominator(10, 0.2) == 8
    assert noise_denominator(10, 0.2, 0.1) == 7
    assert noise_denominator(3, 0.5) == 2
    with pytest.raises(InvalidParameterError):
        noise_denominator(10, 0.6, 0.4)


def test_add_client_noise_without_noise_is_exact():
    votes = VoteVector(bits=np.array([0, 1, 1, 0]), k=2)
    noisy = add_client_noise(votes, 0.0, 4, np.random.default_rng(0))
    assert noisy.values.tolist() == [0.0, 1.0, 1.0, 0.0]


def test_client_noise_share_has_scaled_std():
    """sigma_total=10 with n_effective=4 gives per-client std 5."""
    rng = np.random.default_rng(7)
    shares = client_noise_matrix(100_000, 2, 10.0, 4, rng)
    assert shares.std(axis=0) == pytest.approx([5.0, 5.0], rel=0.02)


def test_add_client_noise_uses_scaled_std():
    votes = VoteVector(bits=np.array([1, 0]), k=1)
    rng = np.random.default_rng(11)
    draws = np.array([add_client_noise(votes, 10.0, 4, rng).values for _ in range(20_000)])
    assert draws.mean(axis=0) == pytest.approx([1.0, 0.0], abs=0.15)
    assert draws.std(axis=0) == pytest.approx([5.0, 5.0], rel=0.03)


def test_aggregate_noise_variance_equals_sigma_squared():
    """n=100 shares of variance sigma^2/n sum to variance sigma^2."""
    sigma, n = 12.5, 100
    rng = np.random.default_rng(3)
    totals = np.concatenate([
        client_noise_matrix(n, 10_000, sigma, n, rng).sum(axis=0) for _ in range(10)
    ])
    assert totals.var() == pytest.approx(sigma**2, rel=0.05)


def test_dropout_tolerant_survivors_keep_full_variance():
    """xi=0.2, n=10, two clients drop: the 8 remaining shares still give sigma^2."""
    sigma = 4.0
    n_effective = noise_denominator(10, 0.2)
    rng = np.random.default_rng(5)
    totals = client_noise_matrix(8, 100_000, sigma, n_effective, rng).sum(axis=0)
    assert totals.var() >= 0.98 * sigma**2


@pytest.mark.parametrize(
    "ballots, expected",
    [
        ([[1, 0], [1, 0], [0, 1]], [2, 1]),
        ([[0, 1, 1]], [0, 1, 1]),
        ([[1, 0, 0]] * 7, [7, 0, 0]),
    ],
)
def test_aggregate_plain_examples(ballots, expected):
    vectors = [VoteVector(bits=np.array(b), k=int(sum(b))) for b in ballots]
    aggregate = aggregate_plain(vectors)
    assert aggregate.values.tolist() == expected
    assert aggregate.n_contributors == len(ballots)


def test_aggregate_noisy_sums_floats():
    rng = np.random.default_rng(0)
    ballots = [add_client_noise(VoteVector(np.array([1, 0]), 1), 1.0, 2, rng) for _ in range(3)]
    total = aggregate_noisy(ballots)
    assert total.values == pytest.approx(np.sum([b.values for b in ballots], axis=0))


def test_select_winner_examples():
    assert select_winner(AggregateVotes(np.array([2.3, 5.1, -0.4]))) == 1
    assert select_winner(AggregateVotes(np.array([7.0, 7.0]))) == 0


def test_unanimous_vote_survives_noise():
    rng = np.random.default_rng(42)
    plain = np.zeros(100)
    plain[3] = 250
    hits = 0
    trials = 10_000
    for _ in range(trials):
        noisy = plain + rng.normal(0.0, 12.5, size=100)
        hits += select_winner(AggregateVotes(noisy, n_contributors=250)) == 3
    assert hits / trials >= 0.999


def test_relabelling_candidates_relabels_ballots_and_winner():
    rng = np.random.default_rng(17)
    checked = 0
    for _ in range(50):
        losses = rng.normal(size=(9, 6))
        perm = rng.permutation(6)
        ballots = [top_k_votes(LossVector(row), 2) for row in losses]
        relabelled = [top_k_votes(LossVector(row[perm]), 2) for row in losses]
        for ballot, moved in zip(ballots, relabelled):
            assert moved.bits.tolist() == ballot.bits[perm].tolist()

        plain = aggregate_plain(ballots).values
        moved_plain = aggregate_plain(relabelled).values
        assert moved_plain.tolist() == plain[perm].tolist()
        if np.count_nonzero(plain == plain.max()) == 1:
            winner = select_winner(aggregate_plain(ballots))
            assert perm[select_winner(aggregate_plain(relabelled))] == winner
            checked += 1
    assert checked > 10


@pytest.mark.parametrize("shift", [-7.0, 3.0, 1000.0])
def test_ballot_ignores_constant_loss_shift(shift):
    rng = np.random.default_rng(5)
    for _ in range(20):
        losses = rng.integers(0, 20, size=12).astype(float)
        for k in (1, 4, 12):
            assert top_k_votes(LossVector(losses + shift), k).bits.tolist() == top_k_votes(LossVector(losses), k).bits.tolist()
