import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from crpo_lab.core import (
    D,
    CandidateSet,
    ComparisonMatrix,
    Counterpart,
    CounterpartRoster,
    Dimension,
    Judgment,
    Mode,
    Verdict,
)
from crpo_lab.errors import MissingCounterpartResponse, UnresolvedInvalidCells
from crpo_lab.judging import SimJudge, SimJudgeConfig
from crpo_lab.reward import (
    RewardMode,
    SeparabilitySetup,
    absolute_reward,
    absolute_score_reward,
    aggregate_reward,
    build_comparison_matrix,
    reward_separability,
)

from conftest import resp


def roster_of(qualities, query_id="q1"):
    return CounterpartRoster(
        tuple(
            Counterpart(f"cp{c}", {query_id: resp(f"cp{c}", q, query_id)})
            for c, q in enumerate(qualities)
        )
    )


def matrix(entries, ties=None):
    return ComparisonMatrix("q1", np.asarray(entries, dtype=np.int8), ties)


# --- matrix construction ---------------------------------------------------


def test_strict_dominance_matrix():
    group = CandidateSet("q1", (resp("a", 0.9), resp("b", 0.1)))
    m = build_comparison_matrix(group, roster_of([0.5]), SimJudge())
    assert m.entries.tolist() == [[[1, 1, 1, 1]], [[0, 0, 0, 0]]]


def test_all_ties():
    group = CandidateSet("q1", (resp("a", 0.5), resp("b", 0.5)))
    m = build_comparison_matrix(group, roster_of([0.5, 0.5]), SimJudge())
    assert not m.entries.any() and m.tie_mask.all()
    assert aggregate_reward(m).rewards == (0.0, 0.0)
    assert aggregate_reward(m, tie_credit=0.5).rewards == (0.5, 0.5)


def test_matches_brute_force_comparator():
    rng = np.random.default_rng(7)
    cand_q = rng.uniform(size=(3, D))
    cp_q = rng.uniform(size=(5, D))
    group = CandidateSet("q1", tuple(resp(f"g{g}", tuple(cand_q[g])) for g in range(3)))
    m = build_comparison_matrix(group, roster_of([tuple(q) for q in cp_q]), SimJudge())
    oracle = np.zeros((3, 5, D), dtype=np.int8)
    for g in range(3):
        for c in range(5):
            for d in range(D):
                oracle[g, c, d] = cand_q[g, d] > cp_q[c, d]
    np.testing.assert_array_equal(m.entries, oracle)


def test_missing_counterpart_response():
    roster = CounterpartRoster((Counterpart("cp0", {"other": resp("cp0", 0.5, "other")}),))
    group = CandidateSet("q1", (resp("a", 0.9), resp("b", 0.1)))
    with pytest.raises(MissingCounterpartResponse):
        build_comparison_matrix(group, roster, SimJudge())


def test_precomputed_counterpart_responses_take_precedence():
    group = CandidateSet("q1", (resp("a", 0.9), resp("b", 0.1)))
    cached = {(0, "q1"): resp("cp0", 0.95)}
    m = build_comparison_matrix(group, roster_of([0.0]), SimJudge(), cached)
    assert not m.entries.any()


class FailingJudge:
    """Fails the first ``fail_times`` calls for a given subject."""

    judge_id = "failing"

    def __init__(self, subject, fail_times):
        self.subject, self.remaining = subject, fail_times
        self.inner = SimJudge()

    def pairwise(self, a, b, query=None):
        if a.producer == self.subject and self.remaining > 0:
            self.remaining -= 1
            raise RuntimeError("judge timeout")
        return self.inner.pairwise(a, b, query)


def test_failed_cell_requeued_once_then_succeeds():
    group = CandidateSet("q1", (resp("a", 0.9), resp("b", 0.1)))
    m = build_comparison_matrix(group, roster_of([0.5]), FailingJudge("a", 1))
    assert not m.invalid_mask.any()
    assert aggregate_reward(m).rewards == (1.0, 0.0)


def test_persistent_failure_fails_aggregation():
    group = CandidateSet("q1", (resp("a", 0.9), resp("b", 0.1)))
    m = build_comparison_matrix(group, roster_of([0.5]), FailingJudge("a", 2))
    assert m.invalid_mask[0].all() and not m.invalid_mask[1].any()
    with pytest.raises(UnresolvedInvalidCells):
        aggregate_reward(m)


# --- aggregation -----------------------------------------------------------


def test_half_wins():
    e = np.zeros((1, 5, 4), dtype=np.int8)
    e.flat[:10] = 1
    assert aggregate_reward(matrix(e)).rewards == (0.5,)


def test_all_ones():
    assert aggregate_reward(matrix(np.ones((1, 5, 4)))).rewards == (1.0,)


def test_wins_on_first_three_counterparts_two_dims():
    e = np.zeros((1, 5, 4), dtype=np.int8)
    e[0, :3, :2] = 1
    assert aggregate_reward(matrix(e)).rewards == (0.3,)


def test_tie_credit_validation():
    with pytest.raises(ValueError):
        aggregate_reward(matrix(np.zeros((1, 5, 4))), tie_credit=0.25)


matrices = st.integers(1, 8).flatmap(
    lambda g: arrays(np.int8, (g, 5, D), elements=st.integers(0, 1))
)


@settings(max_examples=200)
@given(matrices)
def test_bounds_and_granularity(e):
    rewards = aggregate_reward(matrix(e)).rewards
    for g, r in enumerate(rewards):
        assert 0.0 <= r <= 1.0
        assert round(r * 20) / 20 == r
        assert (r == 1.0) == bool(e[g].all())
        assert (r == 0.0) == (not e[g].any())


@settings(max_examples=200)
@given(matrices, st.randoms(use_true_random=False))
def test_permutation_invariance(e, rnd):
    base = aggregate_reward(matrix(e)).rewards
    cps = list(range(5))
    dims = list(range(D))
    rnd.shuffle(cps)
    rnd.shuffle(dims)
    assert aggregate_reward(matrix(e[:, cps, :])).rewards == base
    assert aggregate_reward(matrix(e[:, :, dims])).rewards == base


@settings(max_examples=200)
@given(matrices, st.data())
def test_single_flip_adds_one_cell(e, data):
    zeros = np.argwhere(e == 0)
    if len(zeros) == 0:
        return
    g, c, d = zeros[data.draw(st.integers(0, len(zeros) - 1))]
    flipped = e.copy()
    flipped[g, c, d] = 1
    before = aggregate_reward(matrix(e)).rewards
    after = aggregate_reward(matrix(flipped)).rewards
    assert after[g] - before[g] == pytest.approx(1 / 20, abs=1e-15)
    assert all(after[i] == before[i] for i in range(len(before)) if i != g)


@settings(max_examples=100)
@given(matrices, st.data())
def test_tie_credit_half(e, data):
    ties = np.where(e == 0, data.draw(arrays(np.int8, e.shape, elements=st.integers(0, 1))), 0)
    half = aggregate_reward(matrix(e, ties), tie_credit=0.5).rewards
    for g, r in enumerate(half):
        assert r == pytest.approx((e[g].sum() + 0.5 * ties[g].sum()) / 20)


# --- absolute baseline -----------------------------------------------------


def _absolute(scores):
    return Judgment("q1", "a", None, Mode.ABSOLUTE, dict(zip(Dimension, scores)), "test")


@pytest.mark.parametrize(
    "scores,expected", [((5, 5, 5, 5), 1.0), ((1, 1, 1, 1), 0.0), ((4, 4, 4, 5), 0.8125)]
)
def test_absolute_score_reward(scores, expected):
    assert absolute_score_reward(_absolute(scores)) == expected


def test_absolute_reward_vector():
    group = CandidateSet("q1", (resp("a", 1.0), resp("b", 0.0)))
    assert absolute_reward(group, SimJudge()).rewards == (1.0, 0.0)


# --- separability ----------------------------------------------------------


@pytest.mark.parametrize("mode", list(RewardMode))
def test_noise_free_separability_is_exact(mode):
    assert reward_separability(mode, SeparabilitySetup(), 50) == 1.0


@pytest.mark.parametrize("mode", list(RewardMode))
def test_identical_quality_separability_is_half(mode):
    assert reward_separability(mode, SeparabilitySetup(gap=0.0), 50) == 0.5


def test_separability_rejects_zero_trials():
    with pytest.raises(ValueError):
        reward_separability("crpo", SeparabilitySetup(), 0)


def test_separability_tracks_oracle_at_moderate_noise():
    # frozen from an independent vectorized Monte-Carlo of the same setup
    setup = SeparabilitySetup(sim=SimJudgeConfig(noise_sigma=0.1, seed=11))
    assert reward_separability("crpo", setup, 2000) == pytest.approx(0.9449, abs=0.02)
    assert reward_separability("absolute", setup, 2000) == pytest.approx(0.8705, abs=0.025)
