"""Weighted ranking loss: weights, hinge, sampling, and exhaustive oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wordsem import warp
from wordsem.errors import ParameterError


# ---------------------------------------------------------------------------
# rank weight

def test_weight_of_rank_one_is_one():
    assert warp.weight_L(1) == 1.0


def test_weight_of_rank_three_is_eleven_sixths():
    assert warp.weight_L(3) == pytest.approx(1 + 0.5 + 1 / 3, abs=1e-15)


@given(st.integers(min_value=1, max_value=500))
def test_weight_increment_is_harmonic(r):
    assert warp.weight_L(r + 1) - warp.weight_L(r) == pytest.approx(1.0 / (r + 1), abs=1e-12)
    assert warp.weight_L(r + 1) > warp.weight_L(r)


def test_weight_rejects_rank_below_one():
    with pytest.raises(ParameterError):
        warp.weight_L(0)


# ---------------------------------------------------------------------------
# hinge loss

def test_satisfied_margin_gives_zero_loss():
    assert warp.warp_loss(np.array([2.0, 0.5]), 0, 1, rank=1) == 0.0


def test_violated_margin_rank_one():
    assert warp.warp_loss(np.array([0.2, 0.5]), 0, 1, rank=1) == pytest.approx(1.3, abs=1e-12)


def test_violated_margin_rank_three():
    expected = (1 + 0.5 + 1 / 3) * 1.3
    assert warp.warp_loss(np.array([0.2, 0.5]), 0, 1, rank=3) == pytest.approx(expected, abs=1e-12)


def test_coincident_indices_rejected():
    with pytest.raises(ParameterError):
        warp.warp_loss(np.array([0.2, 0.5]), 1, 1, rank=1)


def test_loss_and_gradient_match_direct_formula_on_random_instances():
    rng = np.random.default_rng(np.random.PCG64(3))
    for _ in range(2000):
        k = int(rng.integers(2, 20))
        scores = rng.normal(size=k)
        p, n = rng.choice(k, size=2, replace=False)
        rank = int(rng.integers(1, k + 1))
        margin = 1.0 - scores[p] + scores[n]
        weight = sum(1.0 / j for j in range(1, rank + 1))
        expected = weight * max(0.0, margin)
        assert warp.warp_loss(scores, p, n, rank) == pytest.approx(expected, abs=1e-12)


def test_gradient_matches_finite_differences_away_from_kink():
    rng = np.random.default_rng(np.random.PCG64(4))
    h = 1e-7
    for _ in range(200):
        k = int(rng.integers(3, 12))
        scores = rng.normal(size=k)
        p, n = rng.choice(k, size=2, replace=False)
        rank = int(rng.integers(1, k))
        margin = 1.0 - scores[p] + scores[n]
        if abs(margin) < 1e-3:
            continue
        weight = warp.weight_L(rank)
        analytic = np.zeros(k)
        if margin > 0:
            analytic[p], analytic[n] = -weight, weight
        for i in range(k):
            e = np.zeros(k)
            e[i] = h
            num = (warp.warp_loss(scores + e, p, n, rank) - warp.warp_loss(scores - e, p, n, rank)) / (2 * h)
            assert num == pytest.approx(analytic[i], abs=1e-6)


def test_step_against_gradient_decreases_active_loss():
    rng = np.random.default_rng(np.random.PCG64(5))
    for _ in range(100):
        scores = rng.normal(size=6)
        p, n = 0, 1
        if 1.0 - scores[p] + scores[n] <= 1e-3:
            continue
        rank = 2
        weight = warp.weight_L(rank)
        grad = np.zeros(6)
        grad[p], grad[n] = -weight, weight
        stepped = scores - 1e-6 * grad
        assert warp.warp_loss(stepped, p, n, rank) < warp.warp_loss(scores, p, n, rank)


# ---------------------------------------------------------------------------
# sampled update

def test_universal_violation_pins_tries_and_rank():
    k = 8
    scores = np.zeros(k)
    scores[0] = -10.0  # the positive is far below every negative
    for seed in range(200):
        upd = warp.sample_update(scores, {0}, seed=seed)
        assert upd.tries == 1
        assert upd.rank_estimate == k - 1
        assert upd.positive == 0
        assert upd.negative in range(1, k)
        weight = warp.weight_L(k - 1)
        assert upd.grad[upd.positive] == -weight
        assert upd.grad[upd.negative] == weight
        assert np.count_nonzero(upd.grad) == 2


def test_no_violation_exhausts_budget_with_zero_update():
    scores = np.zeros(8)
    scores[0] = 2.0  # beats every negative by the full margin
    for seed in range(50):
        upd = warp.sample_update(scores, {0}, seed=seed)
        assert upd.negative is None
        assert upd.tries == 7
        assert upd.loss == 0.0
        assert not upd.grad.any()
        # the exhaustive hinge over all negatives is also zero
        assert all(1.0 - scores[0] + scores[n] <= 0 for n in range(1, 8))


def test_sampling_tries_match_truncated_geometric_mean():
    k, budget = 8, 7
    scores = np.zeros(k)
    scores[0] = 0.5
    scores[1] = 0.0   # the single violator: 1 - 0.5 + 0.0 > 0
    scores[2:] = -2.0  # the rest satisfy the margin
    q = 1.0 / 7.0
    closed_form = sum(s * q * (1 - q) ** (s - 1) for s in range(1, budget + 1))
    closed_form += budget * (1 - q) ** budget
    tries = [warp.sample_update(scores, {0}, seed=s).tries for s in range(10_000)]
    assert np.mean(tries) == pytest.approx(closed_form, rel=0.05)


def test_update_is_seed_deterministic():
    scores = np.linspace(-1, 1, 10)
    a = warp.sample_update(scores, {0, 3}, seed=99)
    b = warp.sample_update(scores, {0, 3}, seed=99)
    assert (a.positive, a.negative, a.tries, a.loss) == (b.positive, b.negative, b.tries, b.loss)


def test_rank_estimate_floor_formula():
    k = 10
    scores = np.zeros(k)
    scores[0] = -10.0
    upd = warp.sample_update(scores, {0}, seed=0, budget=4)
    assert upd.rank_estimate == max(1, (k - 1) // upd.tries)


def test_positive_drawn_only_from_relevant_set():
    scores = np.zeros(6)
    seen = {warp.sample_update(scores, {1, 4}, seed=s).positive for s in range(100)}
    assert seen == {1, 4}


def test_degenerate_relevant_sets_rejected():
    with pytest.raises(ParameterError):
        warp.sample_update(np.zeros(4), set())
    with pytest.raises(ParameterError):
        warp.sample_update(np.zeros(4), {0, 1, 2, 3})


# ---------------------------------------------------------------------------
# exhaustive oracles

def test_unique_maximum_has_rank_zero():
    assert warp.exhaustive_rank(np.array([1.0, 5.0, 2.0]), 1) == 0


def test_rank_counts_strictly_better_scores():
    assert warp.exhaustive_rank(np.array([3.0, 2.0, 1.0]), 2) == 2


def test_ties_do_not_count_toward_rank():
    assert warp.exhaustive_rank(np.ones(5), 3) == 0


def test_perfect_ranking_has_zero_objective():
    assert warp.exhaustive_objective(np.array([5.0, 4.0, 1.0, 0.0]), {0, 1}) == 0


def test_objective_counts_misordered_pairs():
    assert warp.exhaustive_objective(np.array([1.0, 2.0, 3.0, 4.0]), {0, 2}) == 3


def test_reversed_perfect_ranking_is_worst_case():
    scores = np.array([0.0, 1.0, 5.0, 6.0])
    assert warp.exhaustive_objective(scores, {0, 1}) == 4  # |r| * |complement|


@settings(max_examples=200)
@given(
    st.lists(st.integers(-1000, 1000), min_size=3, max_size=12),
    st.data(),
)
def test_objective_invariant_under_monotone_transforms(values, data):
    # an eighth-integer grid keeps the affine transform exact in binary
    # floating point, so strict score orderings survive it unchanged
    scores = np.array(values) / 8.0
    k = len(scores)
    size = data.draw(st.integers(min_value=1, max_value=k - 1))
    relevant = set(data.draw(st.permutations(range(k)))[:size])
    base = warp.exhaustive_objective(scores, relevant)
    assert warp.exhaustive_objective(3.0 * scores + 7.0, relevant) == base
    assert warp.exhaustive_objective(np.tanh(scores / 100.0), relevant) == base
