import math

import numpy as np
import pytest

from obsw import model
from obsw.model import ParameterError, SpecError
from obsw.paths import TimeGrid, simulate_forward
from obsw.penalized import (backward_step_penalized, cauchy_gap, penalty_violation_norm, solve_penalized)
from obsw.reflected import solve_reflected
from obsw.regression import condexp_fit


def test_fit_constant(rng):
    x = rng.normal(size=500)
    f = condexp_fit(np.full(500, 3.25), x, 2)
    np.testing.assert_allclose(f(rng.normal(size=50) * 10), 3.25, atol=1e-12)


def test_fit_identity(rng):
    x = rng.normal(2.0, 3.0, size=400)
    f = condexp_fit(x, x, 2)
    grid = np.linspace(-5, 9, 30)
    np.testing.assert_allclose(f(grid), grid, atol=1e-10)


def test_fit_square_with_line_on_symmetric_sample(rng):
    u = rng.normal(size=1000)
    x = np.concatenate([u, -u])
    f = condexp_fit(x**2, x, 1)
    # closed-form least squares: slope = cov(x, x^2)/var(x) = 0 for a symmetric sample
    assert f(1.0) - f(0.0) == pytest.approx(0.0, abs=1e-12)
    assert f(0.0) == pytest.approx(np.mean(x**2), rel=1e-12)


def test_fit_degree_reduced_on_degenerate_states():
    x = np.array([1.0, 1.0, 1.0, 2.0])
    f = condexp_fit(np.array([1.0, 2.0, 3.0, 5.0]), x, 3)
    assert f.reduced
    assert f(1.0) == pytest.approx(2.0)
    assert f(2.0) == pytest.approx(5.0)


def test_fit_all_states_equal():
    f = condexp_fit(np.array([1.0, 3.0]), np.array([0.5, 0.5]), 2)
    assert f.degree == 0 and f.reduced
    assert f(7.0) == 2.0


def _two_mode(C12=1.0, C21=None, f="0"):
    C21 = C12 if C21 is None else C21
    return model.simple_problem(2, f=f, C=[[0, C12], [C21, 0]])


def test_step_single_mode():
    spec = model.simple_problem(1, f="x")
    y, dk = backward_step_penalized(np.array([[1.0, 2.0]]), np.zeros((1, 2)), 5.0, 0.1, spec, np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(y, [[1.3, 2.4]])
    assert np.all(dk == 0)


def test_step_penalty_lifts_lower_mode():
    spec = _two_mode(1.0)
    y, dk = backward_step_penalized(np.array([[0.0], [5.0]]), np.zeros((2, 1)), 5.0, 0.1, spec, np.ones((2, 1)))
    np.testing.assert_allclose(y[:, 0], [2.0, 5.0])
    np.testing.assert_allclose(dk[:, 0], [2.0, 0.0])


@pytest.mark.parametrize("c", [0.0, 0.5, 3.0])
def test_step_inside_domain_no_penalty(c):
    spec = _two_mode(c, f="1")
    y, dk = backward_step_penalized(np.array([[3.0], [3.0]]), np.zeros((2, 1)), 5.0, 0.1, spec, np.ones((2, 1)))
    np.testing.assert_allclose(y[:, 0], [3.1, 3.1])
    assert np.all(dk == 0)


def test_step_stability_bound():
    spec = _two_mode()
    with pytest.raises(ParameterError):
        backward_step_penalized(np.zeros((2, 1)), np.zeros((2, 1)), 6.0, 0.1, spec, np.ones((2, 1)))


@pytest.mark.parametrize("n", [0.0, 1.0, 5.0])
def test_constant_system(n):
    spec = model.simple_problem(2, b="0", sigma="0", f="0", g="x", x0=1.0, C=[[0, 0.1], [0.2, 0]])
    g = TimeGrid.for_spec(spec)
    sol = solve_penalized(simulate_forward(spec, g, 64, 1), spec, g, n)
    assert np.all(sol.Y == 1.0) and np.all(sol.Z == 0.0) and np.all(sol.dK == 0.0)


def test_linear_decay_matches_explicit_recursion():
    spec = model.simple_problem(1, b="0", sigma="0", f="-y", g="1", n_steps=100)
    g = TimeGrid.for_spec(spec)
    sol = solve_penalized(simulate_forward(spec, g, 8, 1), spec, g, 3.0)
    y = 1.0
    for _ in range(100):
        y = y + (-y) * 0.01
    assert sol.y0[0] == pytest.approx(y, rel=1e-12)
    assert y == pytest.approx(0.36603, abs=1e-5)
    assert abs(sol.y0[0] - math.exp(-1)) <= 0.002


def test_stability_bound_on_solve(desk2):
    g = TimeGrid.for_spec(desk2)
    b = simulate_forward(desk2, g, 100, 1)
    with pytest.raises(ParameterError):
        solve_penalized(b, desk2, g, 6.0)
    with pytest.raises(ParameterError):
        solve_penalized(b, desk2, g, -1.0)


def test_single_mode_penalized_is_reflected_bitwise():
    spec = model.simple_problem(1, b="0.1", sigma="0.3", f="x - 0.5*y + z", g="max(x, 0.5)")
    g = TimeGrid.for_spec(spec)
    b = simulate_forward(spec, g, 3000, 12)
    ref = solve_reflected(b, spec, g)
    for n in (0.0, 2.0, 5.0):
        pen = solve_penalized(b, spec, g, n)
        assert np.array_equal(pen.Y, ref.Y) and np.array_equal(pen.Z, ref.Z) and np.array_equal(pen.dK, ref.dK)


def test_solve_is_deterministic(desk2):
    g = TimeGrid.for_spec(desk2)
    a = solve_penalized(simulate_forward(desk2, g, 2000, 3), desk2, g, 5.0)
    b = solve_penalized(simulate_forward(desk2, g, 2000, 3), desk2, g, 5.0)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.dK, b.dK)


def test_increments_nonnegative(desk2):
    g = TimeGrid(1.0, 20)
    sol = solve_penalized(simulate_forward(desk2, g, 2000, 3), desk2, g, 10.0)
    assert np.all(sol.dK >= 0)
    assert sol.dK.sum() > 0


def test_violation_zero_inside_domain(desk2):
    g = TimeGrid.for_spec(desk2)
    ref = solve_reflected(simulate_forward(desk2, g, 2000, 3), desk2, g)
    v = penalty_violation_norm(ref, 0.0)
    assert v["sup"] <= 1e-24
    assert set(v["pairs"]) == {(1, 2), (2, 1)}


def test_violation_hand_example():
    from obsw.penalized import BackwardSolution
    Y = np.zeros((2, 3, 2))
    Y[1] = 1.0  # Y1 - Y2 + C = -0.5 everywhere for mode 1
    sol = BackwardSolution(Y, np.zeros_like(Y), np.zeros_like(Y), "penalized(4)", TimeGrid(1.0, 2),
                           np.array([[0, 0.5], [0.5, 0]]), 2, 4.0)
    v = penalty_violation_norm(sol, 0.0)
    assert v["pairs"][(1, 2)]["sup"] == pytest.approx(0.25)
    assert v["pairs"][(1, 2)]["integral"] == pytest.approx(16 * 0.25 * 1.0)
    assert v["pairs"][(2, 1)]["sup"] == 0.0
    weighted = penalty_violation_norm(sol, 1.0)
    assert weighted["pairs"][(1, 2)]["sup"] == pytest.approx(0.25 * math.e)


def test_cauchy_gap_self_is_zero(desk2):
    g = TimeGrid.for_spec(desk2)
    sol = solve_penalized(simulate_forward(desk2, g, 500, 3), desk2, g, 5.0)
    assert cauchy_gap(sol, sol, 0.0) == 0.0


def test_cauchy_gap_grid_mismatch(desk2):
    a_grid, b_grid = TimeGrid(1.0, 10), TimeGrid(1.0, 15)
    a = solve_penalized(simulate_forward(desk2, a_grid, 100, 3), desk2, a_grid, 1.0)
    b = solve_penalized(simulate_forward(desk2, b_grid, 100, 3), desk2, b_grid, 1.0)
    with pytest.raises(SpecError):
        cauchy_gap(a, b)


def test_cauchy_gap_symmetric_on_nested_grids(desk2):
    from obsw.paths import coarsen_increments
    fine = TimeGrid(1.0, 20)
    bf = simulate_forward(desk2, fine, 1000, 3)
    coarse = TimeGrid(1.0, 10)
    bc = simulate_forward(desk2, coarse, 1000, 3, dW=coarsen_increments(bf.dW, 2))
    a = solve_penalized(bc, desk2, coarse, 5.0)
    b = solve_penalized(bf, desk2, fine, 10.0)
    assert cauchy_gap(a, b) == cauchy_gap(b, a) > 0
