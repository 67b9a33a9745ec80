import numpy as np
import pytest

from obsw import model
from obsw.oracle import (OracleRefusal, brute_force_feedback, dp_solve, enumerate_strategies,
                         evaluate_lattice_policy)


def test_martingale_root_value():
    spec = model.simple_problem(1, b="0", sigma="0.7", f="0", g="x", x0=1.3)
    assert dp_solve(spec, 25).value == pytest.approx(1.3, abs=1e-14)


def test_drift_shifts_lattice():
    spec = model.simple_problem(1, b="0.3", sigma="0.5", f="0", g="x", x0=1.0, t_cap=2.0)
    assert dp_solve(spec, 16).value == pytest.approx(1.6, abs=1e-13)


@pytest.mark.parametrize("N", [6, 10, 20])
def test_desk2_matches_stay_in_mode_one_closed_form(N):
    # staying in mode 1 under its own drift: E[X_T] + left Riemann sum of E[X_t]
    closed = 1.2 + 1.0 + 0.1 * (1 - 1 / N)
    lat = dp_solve(model.desk2(), N)
    assert lat.value == pytest.approx(closed, abs=1e-12)
    assert lat.V[1, 0, 0] == pytest.approx(closed - 0.1, abs=1e-12)


def test_exit_nodes_take_terminal_value():
    spec = model.simple_problem(1, b="0", sigma="1", f="1", g="x", x0=0.0, exit_lo=-0.5, exit_hi=0.5, n_steps=4)
    lat = dp_solve(spec, 4)
    assert lat.absorbed[1].sum() == 2
    np.testing.assert_allclose(lat.V[0, 1, :2], lat.x[1, :2])


def test_rows_cover_every_node():
    lat = dp_solve(model.desk2(), 3)
    rows = list(lat.rows())
    assert len(rows) == 2 * (1 + 2 + 3 + 4)
    assert rows[0] == (3, 1, "0:0", lat.value)


def test_enumeration_with_prohibitive_costs_equals_single_mode():
    spec = model.desk2(costs=[[0, 1e6], [1e6, 0]])
    res = enumerate_strategies(spec, 5)
    single = model.simple_problem(1, b="0.2", sigma="0.25", f=None, l="x", g="x", mode=model.SWITCHING,
                                  hypothesis={"sigma_min": 0.25, "b_bound": 0.2})
    assert res.value == pytest.approx(dp_solve(single, 5).value, abs=1e-12)
    assert all(choice == mode for (h, mode), choice in res.policy.items())


def test_enumeration_with_free_switching():
    hyp = dict(model.desk2_document()["hypothesis"], strict_costs=False)
    spec = model.desk2(costs=[[0, 0], [0, 0]], hypothesis=hyp)
    res = enumerate_strategies(spec, 5)
    lat = dp_solve(spec, 5)
    assert res.value == pytest.approx(lat.value, abs=1e-12)
    np.testing.assert_allclose(lat.V[0], lat.V[1], equal_nan=True)


@pytest.mark.parametrize("N", [1, 2, 3])
def test_three_exact_routes_agree(N):
    spec = model.desk2()
    dp = dp_solve(spec, N).value
    assert enumerate_strategies(spec, N).value == pytest.approx(dp, abs=1e-12)
    assert brute_force_feedback(spec, N)[0] == pytest.approx(dp, abs=1e-12)


def test_policy_evaluation_never_switch():
    spec = model.desk2()
    assert evaluate_lattice_policy(spec, 6, lambda k, m, i: i) == pytest.approx(2.2 + 0.1 * 5 / 6, abs=1e-12)


def test_refusals():
    spec = model.desk2()
    with pytest.raises(OracleRefusal, match="10\\^"):
        enumerate_strategies(spec, 7)
    with pytest.raises(OracleRefusal):
        dp_solve(spec, 500)
    with pytest.raises(OracleRefusal):
        brute_force_feedback(spec, 5)
    with pytest.raises(OracleRefusal, match="constant"):
        dp_solve(model.simple_problem(1, sigma="x", f="0"), 4)
    with pytest.raises(OracleRefusal):
        enumerate_strategies(model.simple_problem(4, sigma="1", f="0"), 3)
    with pytest.raises(OracleRefusal, match="y and z"):
        enumerate_strategies(model.simple_problem(1, sigma="1", f="y"), 3)
