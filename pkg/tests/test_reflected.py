import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obsw import model
from obsw.paths import TimeGrid, simulate_forward
from obsw.penalized import BackwardSolution, solve_penalized
from obsw.reflected import (ReflectionError, domain_violation, obstacle, reflect, skorokhod_residual,
                            solve_reflected, solve_strategy_bsde)
from obsw.switching import Strategy


def test_inside_point_unchanged():
    y, inc = reflect(np.array([3.0, 3.0]), np.array([[0, 1.0], [1.0, 0]]))
    np.testing.assert_array_equal(y, [3, 3])
    np.testing.assert_array_equal(inc, [0, 0])


def test_two_mode_lift():
    y, inc = reflect(np.array([0.0, 5.0]), np.array([[0, 1.0], [1.0, 0]]))
    np.testing.assert_array_equal(y, [4, 5])
    np.testing.assert_array_equal(inc, [4, 0])


def test_three_mode_hand_iteration():
    C = np.ones((3, 3)) - np.eye(3)
    y, _ = reflect(np.array([0.0, 0.0, 10.0]), C)
    np.testing.assert_array_equal(y, [9, 9, 10])


def test_batch_matches_vectors(rng):
    C = np.array([[0, 1.0, 2.0], [0.5, 0, 1.0], [1.0, 1.0, 0]])
    ys = rng.normal(size=(3, 50)) * 3
    batch, _ = reflect(ys, C)
    for p in range(50):
        np.testing.assert_array_equal(batch[:, p], reflect(ys[:, p], C)[0])


def test_triangle_breach_detected():
    # a negative cost cycle keeps lifting every component
    C = np.array([[0, -1.0, 0.0], [0.0, 0, -1.0], [-1.0, 0.0, 0]])
    with pytest.raises(ReflectionError):
        reflect(np.zeros(3), C)


@st.composite
def valid_costs(draw):
    d = draw(st.integers(1, 5))
    # metric-like costs: distances between random points satisfy the triangle inequality
    pts = np.array(draw(st.lists(st.floats(-5, 5), min_size=d, max_size=d)))
    extra = draw(st.floats(0, 2))
    C = np.abs(pts[:, None] - pts[None, :]) + extra * (1 - np.eye(d))
    y = np.array(draw(st.lists(st.floats(-20, 20), min_size=d, max_size=d)))
    return C, y


@settings(max_examples=300, deadline=None)
@given(valid_costs(), st.floats(0, 5))
def test_reflection_properties(data, bump):
    C, y = data
    d = len(y)
    r, inc = reflect(y, C)
    assert np.all(inc >= 0)
    assert np.array_equal(r, y + inc) or np.allclose(r, y + inc, rtol=0, atol=1e-12)
    assert np.array_equal(reflect(r, C)[0], r)
    # fixed point reached after at most d applications of the map
    cur = y.copy()
    for _ in range(d):
        cur = np.maximum(cur, obstacle(cur, C))
    assert np.array_equal(np.maximum(cur, obstacle(cur, C)), cur)
    bigger = y.copy()
    bigger[0] += bump
    assert np.all(reflect(bigger, C)[0] >= r)


def _degenerate(d=2):
    return model.simple_problem(d, b="0", sigma="0", f="0", g="x", x0=1.3, C=0.2 * (1 - np.eye(d)))


def test_degenerate_constant_solution():
    spec = _degenerate(3)
    g = TimeGrid.for_spec(spec)
    sol = solve_reflected(simulate_forward(spec, g, 32, 1), spec, g)
    assert np.all(sol.Y == 1.3) and np.all(sol.Z == 0) and np.all(sol.dK == 0)


def test_single_mode_matches_unpenalized():
    spec = model.simple_problem(1, b="0.2", sigma="0.5", f="x*x - y", g="x")
    g = TimeGrid.for_spec(spec)
    b = simulate_forward(spec, g, 2000, 4)
    assert np.array_equal(solve_reflected(b, spec, g).Y, solve_penalized(b, spec, g, 0.0).Y)


def test_residual_zero_without_increments():
    Y = np.random.default_rng(1).normal(size=(2, 4, 10))
    sol = BackwardSolution(Y, np.zeros_like(Y), np.zeros_like(Y), "reflected", TimeGrid(1.0, 3),
                           np.array([[0, 0.1], [0.1, 0]]), 2)
    assert skorokhod_residual(sol) == 0.0


def test_residual_counts_pushes_off_boundary():
    Y = np.zeros((2, 2, 1))
    Y[0] = 1.0
    dK = np.zeros_like(Y)
    dK[0, 0] = 2.0
    sol = BackwardSolution(Y, np.zeros_like(Y), dK, "x", TimeGrid(1.0, 1), np.array([[0, 0.5], [0.5, 0]]), 2)
    # Y1 - max(Y2 - C12) = 1.5, pushed by 2
    assert skorokhod_residual(sol) == pytest.approx(3.0)


@pytest.fixture(scope="module")
def desk2_solutions():
    spec = model.desk2()
    g = TimeGrid.for_spec(spec)
    b = simulate_forward(spec, g, 20_000, 99)
    return spec, g, b, solve_reflected(b, spec, g)


def test_reflected_residual_and_domain(desk2_solutions):
    spec, g, b, sol = desk2_solutions
    scale = np.abs(sol.Y).max()
    assert skorokhod_residual(sol) <= 1e-10 * scale
    assert domain_violation(sol) <= 1e-12
    assert sol.dK.sum() > 0


def test_penalized_domain_violation_falls_with_n():
    from obsw.paths import coarsen_increments
    spec = model.desk2()
    fine = TimeGrid(1.0, 80)
    bf = simulate_forward(spec, fine, 10_000, 5)
    v = []
    residual = []
    for n in (10, 40):
        g = TimeGrid(1.0, 2 * n)
        b = simulate_forward(spec, g, 10_000, 5, dW=coarsen_increments(bf.dW, 80 // (2 * n)))
        sol = solve_penalized(b, spec, g, n)
        v.append(domain_violation(sol))
        residual.append(skorokhod_residual(sol))
    assert v[1] < v[0]
    assert residual[1] <= residual[0]


def test_single_mode_no_violation():
    spec = model.simple_problem(1, b="0", sigma="1", f="0", g="x")
    g = TimeGrid.for_spec(spec)
    sol = solve_reflected(simulate_forward(spec, g, 100, 1), spec, g)
    assert domain_violation(sol) == 0.0 and skorokhod_residual(sol) == 0.0


def _constant_strategy(mode, N, P, first_cost=0.0, i0=None):
    modes = np.full((N, P), mode)
    cost = np.zeros((N, P))
    cost[0] = first_cost
    return Strategy(modes, cost, mode if i0 is None else i0)


def test_strategy_value_never_switch_single_mode():
    spec = model.simple_problem(1, b="0.1", sigma="0.4", f="x - 0.3*y + 0.2*z", g="x")
    g = TimeGrid.for_spec(spec)
    b = simulate_forward(spec, g, 5000, 2)
    u, se = solve_strategy_bsde(b, spec, _constant_strategy(0, 10, 5000), g)
    assert u == pytest.approx(solve_reflected(b, spec, g).y0[0], abs=1e-12)
    assert se > 0


def test_strategy_value_immediate_switch(desk2_solutions):
    spec, g, b, _ = desk2_solutions
    P = b.n_paths
    stay, _ = solve_strategy_bsde(b, dataclasses.replace(spec, i0=1), _constant_strategy(1, 10, P), g)
    jump, _ = solve_strategy_bsde(b, spec, _constant_strategy(1, 10, P, first_cost=0.1, i0=0), g)
    assert jump == pytest.approx(stay - 0.1, abs=1e-12)


def test_strategy_shape_checked(desk2_solutions):
    spec, g, b, _ = desk2_solutions
    with pytest.raises(model.SpecError):
        solve_strategy_bsde(b, spec, _constant_strategy(0, 9, b.n_paths), g)
