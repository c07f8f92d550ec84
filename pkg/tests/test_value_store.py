import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlwdispatch.value_store import (
    AdamState,
    DispatchSample,
    ValueTable,
    adam_apply,
    batch_update,
    expected_td_target,
    idle_update,
    td_delta,
)
from rlwdispatch.domain import GridSpec


def table(*vals):
    return ValueTable(np.array(vals, dtype=float))


@pytest.mark.parametrize(
    "V, r, p_c, expected",
    [
        ((0.0, 0.0), 10.0, 1.0, 10.0),
        ((5.0, 0.0), 10.0, 0.0, 4.5),  # (1 - 0) * 0.9 * 5
        ((2.0, 4.0), 10.0, 0.5, 7.7),  # 0.5*(10 + 3.6) + 0.5*1.8
    ],
)
def test_expected_td_target_examples(V, r, p_c, expected):
    s = DispatchSample(0, 1, r, p_c)
    assert expected_td_target(s, table(*V), 0.9) == pytest.approx(expected, abs=1e-12)


def test_gamma_zero_reduces_to_expected_reward():
    s = DispatchSample(0, 1, 7.0, 0.3)
    assert expected_td_target(s, table(4.0, 9.0), 0.0) == pytest.approx(0.3 * 7.0)


@pytest.mark.parametrize("gamma", [-0.1, 1.0, 1.5])
def test_gamma_range_rejected(gamma):
    with pytest.raises(ValueError):
        expected_td_target(DispatchSample(0, 1, 1.0, 1.0), table(0, 0), gamma)


def test_td_delta_examples():
    assert td_delta(DispatchSample(0, 1, 10.0, 1.0), table(0, 0), 0.9) == pytest.approx(10.0)
    assert td_delta(DispatchSample.idle(0), table(10.0), 0.9) == pytest.approx(-1.0)
    assert td_delta(DispatchSample.idle(0), table(0.0), 0.9) == 0.0


@given(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 100), st.floats(0, 1), st.floats(0, 0.99)
)
def test_delta_is_target_minus_value(vs, vsp, r, p, g):
    V = table(vs, vsp)
    s = DispatchSample(0, 1, r, p)
    assert td_delta(s, V, g) == pytest.approx(expected_td_target(s, V, g) - vs, abs=1e-9)


def test_fixed_point_leaves_value_unchanged():
    # V[s] chosen equal to its own expected target: V_s = p(r + g V_s') + (1-p) g V_s
    g, p, r, vsp = 0.9, 0.6, 5.0, 3.0
    vs = p * (r + g * vsp) / (1 - (1 - p) * g)
    V = table(vs, vsp)
    s = DispatchSample(0, 1, r, p)
    assert abs(td_delta(s, V, g)) < 1e-12
    adam = AdamState(2)
    before = V.values.copy()
    batch_update([s], V, adam, g)
    assert np.allclose(V.values, before, atol=1e-10)


def test_adam_first_step_moves_by_base_lr():
    V = table(0.0)
    adam = AdamState(1, base_lr=0.1)
    adam_apply(V, adam, 0, 1.0)
    # m_hat = 1, v_hat = 1 after bias correction
    assert V[0] == pytest.approx(0.1 / (1 + 1e-8), rel=1e-12)
    assert adam.step[0] == 1


def test_adam_zero_delta_is_noop():
    V = table(3.0)
    adam = AdamState(1)
    adam_apply(V, adam, 0, 0.0)
    assert V[0] == 3.0


def test_adam_constant_sign_stream_monotone():
    V = table(0.0)
    adam = AdamState(1, base_lr=0.1)
    trace = []
    for _ in range(5):
        adam_apply(V, adam, 0, 1.0)
        trace.append(V[0])
    assert all(b > a for a, b in zip(trace, trace[1:]))


def test_adam_step_counter_and_moment_invariants():
    rng = np.random.default_rng(0)
    V = ValueTable.zeros(4)
    adam = AdamState(4)
    for k in range(200):
        cell = int(rng.integers(4))
        before = adam.step.copy()
        adam_apply(V, adam, cell, float(rng.normal()))
        diff = adam.step - before
        assert diff[cell] == 1 and diff.sum() == 1
        assert np.all(adam.m2 >= 0)


def test_adam_rejects_non_finite_delta():
    with pytest.raises(ValueError):
        adam_apply(table(0.0), AdamState(1), 0, float("nan"))


def test_empty_batch_is_noop():
    V = table(1.0, 2.0)
    batch_update([], V, AdamState(2), 0.9)
    assert V.values.tolist() == [1.0, 2.0]


def test_disjoint_cells_commute():
    a = DispatchSample(0, 2, 4.0, 0.7)
    b = DispatchSample.idle(1)
    V1, V2 = table(1.0, 2.0, 3.0), table(1.0, 2.0, 3.0)
    batch_update([a, b], V1, AdamState(3), 0.9)
    batch_update([b, a], V2, AdamState(3), 0.9)
    assert V1.values.tolist() == V2.values.tolist()


def test_dispatch_updates_only_driver_cell():
    V = table(1.0, 2.0)
    batch_update([DispatchSample(0, 1, 5.0, 0.8)], V, None, 0.9, sgd_lr=0.5)
    assert V[1] == 2.0
    assert V[0] != 1.0


def test_sgd_chain_converges_to_analytic_fixed_point():
    # A -> B with reward 1, B idles: V_B = gamma V_B => 0; V_A = 1 + gamma*0 = 1
    V = ValueTable.zeros(2)
    for _ in range(500):
        batch_update([DispatchSample(0, 1, 1.0, 1.0), DispatchSample.idle(1)], V, None, 0.9, sgd_lr=0.5)
    assert abs(V[0] - 1.0) < 1e-3
    assert abs(V[1]) < 1e-3


def test_monte_carlo_matches_expected_target():
    rng = np.random.default_rng(11)
    V = table(3.0, 8.0)
    s = DispatchSample(0, 1, 6.0, 0.35)
    g = 0.9
    done = rng.random(100_000) < s.p_c
    targets = np.where(done, s.smoothed_reward + g * V[1], g * V[0])
    se = targets.std(ddof=1) / math.sqrt(targets.size)
    assert abs(targets.mean() - expected_td_target(s, V, g)) < 3 * se


@settings(max_examples=40)
@given(st.lists(st.integers(0, 5), max_size=40), st.booleans())
def test_idle_update_matches_sequential(cells, use_adam):
    rng = np.random.default_rng(len(cells))
    init = rng.normal(size=6) * 5
    V1, V2 = ValueTable(init.copy()), ValueTable(init.copy())
    a1 = AdamState(6) if use_adam else None
    a2 = AdamState(6) if use_adam else None
    batch_update([DispatchSample.idle(c) for c in cells], V1, a1, 0.9, sgd_lr=0.3)
    idle_update(cells, V2, a2, 0.9, sgd_lr=0.3)
    np.testing.assert_allclose(V1.values, V2.values, rtol=1e-14, atol=1e-14)
    if use_adam:
        assert a1.step.tolist() == a2.step.tolist()


def test_csv_round_trip_is_exact(tmp_path):
    grid = GridSpec(3, 4, 250.0)
    V = ValueTable(np.random.default_rng(3).normal(size=12) * 1e3)
    path = tmp_path / "v.csv"
    V.save_csv(path, grid)
    again = ValueTable.load_csv(path)
    assert again.values.tolist() == V.values.tolist()
    header = path.read_text().splitlines()[0]
    assert header == "cell_id,row,col,value"


def test_load_missing_table_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        ValueTable.load_csv(tmp_path / "nope.csv")
