import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rlwdispatch.bandit import LmUcbState, MetricsWindow, default_arms, objective, run_synthetic, ucb_feedback


def test_default_arms_grid():
    arms = default_arms()
    assert arms.size == 41
    assert arms[0] == 0.0 and arms[-1] == pytest.approx(0.3)
    assert np.allclose(np.diff(arms), 0.0075)


def test_objective_weights_answer_rate():
    assert objective(0.5, 0.8) == pytest.approx(0.58)


def test_unpulled_arms_first_in_index_order():
    s = LmUcbState(arms=np.array([0.0, 0.1, 0.2]))
    seen = []
    for _ in range(3):
        seen.append(s.current_arm)
        ucb_feedback(s, 0.5, 0.5)
    assert seen == [0, 1, 2]


def test_two_arm_example_picks_higher_mean():
    s = LmUcbState(arms=np.array([0.0, 0.1]), alpha_q=0.0, c=0.0)
    ucb_feedback(s, 0.4, 0.0)
    ucb_feedback(s, 0.6, 0.0)
    assert s.current_arm == 1


def test_ties_break_to_lowest_index():
    s = LmUcbState(arms=np.array([0.0, 0.1, 0.2]), alpha_q=0.0)
    for _ in range(3):
        ucb_feedback(s, 0.5, 0.0)
    assert s.current_arm == 0


def test_count_discounting():
    s = LmUcbState(arms=np.array([0.0, 0.1]), gamma_n=0.5)
    ucb_feedback(s, 0.5, 0.0)  # arm 0
    ucb_feedback(s, 0.5, 0.0)  # arm 1
    assert s.n == pytest.approx(1.5)
    assert s.N.tolist() == pytest.approx([0.5, 1.0])


def test_q_is_exponential_average():
    s = LmUcbState(arms=np.array([0.0]), alpha_q=0.8)
    ucb_feedback(s, 1.0, 0.0)
    assert s.Q[0] == pytest.approx(0.2)
    ucb_feedback(s, 1.0, 0.0)
    assert s.Q[0] == pytest.approx(0.2 * 0.8 + 0.2)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=60))
def test_counts_stay_bounded_and_threshold_in_arms(feedback):
    s = LmUcbState()
    for cr, ar in feedback:
        th = ucb_feedback(s, cr, ar)
        assert th in s.arms
    assert s.n <= 1 / (1 - s.gamma_n) + 1e-9
    assert np.all(s.N >= 0)
    assert s.N.sum() == pytest.approx(s.n)


def test_rates_out_of_range_rejected():
    with pytest.raises(ValueError):
        ucb_feedback(LmUcbState(), 1.2, 0.0)


def test_random_start_uses_rng():
    a = LmUcbState.with_random_start(np.random.default_rng(1))
    b = LmUcbState.with_random_start(np.random.default_rng(1))
    assert a.current_arm == b.current_arm


def test_validation():
    with pytest.raises(ValueError):
        LmUcbState(gamma_n=1.0)
    with pytest.raises(ValueError):
        LmUcbState(c=-1.0)
    with pytest.raises(ValueError):
        LmUcbState(arms=np.array([]))


def test_stationary_share_of_optimal_arm():
    means = np.array([0.5, 0.4, 0.4, 0.4, 0.4])
    shares = [
        np.mean(run_synthetic(means, 1000, np.random.default_rng(s))[200:] == 0) for s in range(5)
    ]
    assert np.mean(shares) >= 0.8


def test_window_counts_and_expiry():
    w = MetricsWindow(60.0)
    w.record(0.0, True, True)
    w.record(30.0, True, False)
    w.record(50.0, False, False)
    assert w.counts(59.0) == (3, 2, 1)
    assert w.counts(60.0) == (2, 1, 0)  # event at 0 falls out of (0, 60]
    cr, ar = w.rates(60.0)
    assert (cr, ar) == (0.0, 0.5)


def test_window_empty_rates_are_zero():
    assert MetricsWindow().rates(100.0) == (0.0, 0.0)


def test_window_rejects_completed_without_accept():
    with pytest.raises(ValueError):
        MetricsWindow().record(0.0, False, True)


@given(st.lists(st.tuples(st.floats(0, 500), st.booleans(), st.booleans()), max_size=40), st.floats(0, 600))
def test_window_ordering_invariant(events, t):
    w = MetricsWindow(60.0)
    for ts, a, c in sorted(events):
        w.record(ts, a, a and c)
    req, acc, comp = w.counts(t)
    assert comp <= acc <= req
    cr, ar = w.rates(t)
    assert 0 <= cr <= ar <= 1
    if req:
        assert math.isclose(cr, comp / req)
