"""Obliquely reflected backward scheme, constraint diagnostics and the
value of a fixed switching strategy."""
from __future__ import annotations

import numpy as np

from .model import ProblemSpec, SpecError, SwitchingCostMatrix, effective_driver
from .paths import PathBundle, TimeGrid, eval_located
from .penalized import DEFAULT_DEGREE, BackwardSolution, backward_solve
from .regression import condexp_fit

FIXED_POINT_TOL = 1e-12
_POLISH_PASSES = 8


class ReflectionError(RuntimeError):
    """The reflection map failed to settle, which means the costs break the triangle inequality."""


def obstacle(y: np.ndarray, C: np.ndarray) -> np.ndarray:
    """max_{j != i}(y_j - C_ij) for every i; y has shape (d, ...)."""
    d = y.shape[0]
    if d == 1:
        return np.full_like(y, -np.inf)
    Cb = C.reshape(C.shape + (1,) * (y.ndim - 1))
    cand = y[None, :] - Cb
    idx = np.arange(d)
    cand[idx, idx] = -np.inf
    return cand.max(axis=1)


def reflect(y, costs) -> tuple[np.ndarray, np.ndarray]:
    """Push each component up to its obstacle until the point lies in the closed domain.

    Accepts a (d,) vector or a (d, P) batch. Returns (fixed point, increments).
    Under the triangle inequality one pass settles the point up to rounding;
    further passes only absorb last-place rounding so the result is an exact
    fixed point of the map.
    """
    C = costs.C if isinstance(costs, SwitchingCostMatrix) else np.asarray(costs, dtype=float)
    y0 = np.asarray(y, dtype=float)
    d = y0.shape[0]
    cur = y0.copy()
    for n in range(d + 1 + _POLISH_PASSES):
        nxt = np.maximum(cur, obstacle(cur, C))
        if np.array_equal(nxt, cur):
            return nxt, nxt - y0
        if n >= d and np.max(np.abs(nxt - cur)) > FIXED_POINT_TOL:
            break
        cur = nxt
    raise ReflectionError(f"no fixed point after {d + 1} applications; check the cost triangle inequality")


def solve_reflected(bundle: PathBundle, spec: ProblemSpec, grid: TimeGrid,
                    degree: int = DEFAULT_DEGREE) -> BackwardSolution:
    """Split-step scheme: Euler step with the driver, then reflection."""
    C = spec.costs.C

    def rule(cont, z, u, t, k):
        if spec.d == 1:
            return u, np.zeros_like(u)
        return reflect(u, C)

    return backward_solve(bundle, spec, grid, degree, rule, "reflected")


def skorokhod_residual(sol: BackwardSolution, per_mode: bool = False, per_step: bool = False):
    """Discrete integral of the distance to the obstacle against dK.

    Zero means K only grows while Y sits on the obstacle. ``per_step`` returns
    the (d, N+1) path averages of the summands instead of the max over modes.
    """
    if sol.d == 1:
        if per_step:
            return np.zeros(sol.Y.shape[:2])
        return np.zeros(1) if per_mode else 0.0
    gap = np.maximum(sol.Y - obstacle(sol.Y, sol.C), 0.0)
    terms = (gap * sol.dK).mean(axis=2)
    if per_step:
        return terms
    per = terms.sum(axis=1)
    return per if per_mode else float(per.max())


def domain_violation(sol: BackwardSolution, per_step: bool = False, per_mode: bool = False):
    """Worst breach max (Y_j - C_ij - Y_i)^+ over modes, steps and paths.

    ``per_step`` gives a (d, N+1) array of per-mode, per-step maxima;
    ``per_mode`` a (d,) array.
    """
    if sol.d == 1:
        breach = np.zeros_like(sol.Y)
    else:
        breach = np.maximum(obstacle(sol.Y, sol.C) - sol.Y, 0.0)
    if per_step:
        return breach.max(axis=2)
    if per_mode:
        return breach.max(axis=(1, 2))
    return float(breach.max())


def solve_strategy_bsde(bundle: PathBundle, spec: ProblemSpec, strategy, grid: TimeGrid,
                        degree: int = DEFAULT_DEGREE) -> tuple[float, float]:
    """Value at t = 0 of following ``strategy`` on the bundle's paths, costs subtracted.

    Solved through the shifted process U~ = U - A, where A(t_k) is the cost of
    switches made strictly before t_k; U~ has no jumps so each step is a plain
    regression Euler step. Returns (value, standard error).
    """
    modes = np.asarray(strategy.modes)
    cost = np.asarray(strategy.step_costs)
    N, P = grid.n_steps, bundle.n_paths
    if bundle.grid != grid or modes.shape != (N, P) or cost.shape != (N, P):
        raise SpecError("strategy does not match the bundle's grid and paths")
    dt, t = grid.dt, grid.times
    drv = effective_driver(spec)
    kappa = bundle.kappa
    # A_after[k] = cost of switches at steps <= k
    A_after = np.cumsum(cost, axis=0)
    A_total = np.where(kappa > 0, A_after[np.maximum(kappa - 1, 0), np.arange(P)], 0.0)
    last_mode = np.where(kappa > 0, modes[np.maximum(kappa - 1, 0), np.arange(P)], spec.i0)
    xT = bundle.X[last_mode, kappa, np.arange(P)]
    U_shift = eval_located(drv.g, t=t[-1], x=xT, step=N, what="g") - A_total
    for k in range(N - 1, -1, -1):
        act = k < kappa
        if not act.any():
            continue
        target = U_shift[act] + A_after[k, act]
        alpha = modes[k, act]
        x = bundle.X[alpha, k, np.flatnonzero(act)]
        w = bundle.dW[k, act] / dt
        new = np.empty_like(target)
        for i in np.unique(alpha):
            sel = alpha == i
            cf = condexp_fit(target[sel], x[sel], degree)
            cont = cf(x[sel])
            zf = condexp_fit((target[sel] - cont) * w[sel], x[sel], degree)
            zz = zf(x[sel])
            psi = eval_located(drv.f[i], t=t[k], x=x[sel], y=cont, z=zz, mode=int(i) + 1, step=k, what="driver")
            new[sel] = cont + psi * dt - A_after[k, act][sel]
        if k == 0:
            se = float(target.std() / np.sqrt(target.size))
        U_shift = U_shift.copy()
        U_shift[act] = new
    if not (0 < kappa).any():
        return float(U_shift.mean()), 0.0
    return float(U_shift.mean()), se
