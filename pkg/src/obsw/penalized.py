"""Penalized backward scheme and its convergence diagnostics.

Both backward schemes share :func:`backward_solve`; they differ only in the
per-step rule that turns the unconstrained Euler values into the stored
values and the increments of K.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .model import ParameterError, ProblemSpec, SpecError, effective_driver
from .paths import PathBundle, TimeGrid, eval_located
from .regression import condexp_fit

STABILITY_BOUND = 0.5
DEFAULT_DEGREE = 2


@dataclass
class BackwardSolution:
    """Discrete (Y, Z, dK) on (mode, step, path) plus scheme metadata.

    ``dK[i, k]`` is the increment of K over step k, recorded at t_k.
    ``fits[(i, k)]`` keeps the continuation and Z regressions so the value
    field can be re-evaluated off the simulated paths.
    """

    Y: np.ndarray
    Z: np.ndarray
    dK: np.ndarray
    scheme: str
    grid: TimeGrid
    C: np.ndarray
    degree: int
    n_penalty: float = 0.0
    fits: dict = field(default_factory=dict)
    reduced_fits: list = field(default_factory=list)
    y0_se: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.Y.shape[0]

    @property
    def y0(self) -> np.ndarray:
        """Value per mode at t = 0 (path average of the t = 0 field)."""
        return self.Y[:, 0, :].mean(axis=1)

    @property
    def penalized(self) -> bool:
        return self.scheme.startswith("penalized")


def _driver_values(spec, drv, k, t, x, y, z):
    out = np.empty_like(y)
    for i in range(spec.d):
        out[i] = eval_located(drv.f[i], t=t, x=x[i], y=y[i], z=z[i], mode=i + 1, step=k, what="driver")
    return out


def negative_part(a):
    return np.maximum(-a, 0.0)


def backward_step_penalized(cont_y, z_est, n_penalty, dt, spec: ProblemSpec, x_states, t=0.0, k=None):
    """One explicit Euler step with the penalty evaluated at continuation values.

    ``cont_y``, ``z_est`` and ``x_states`` have shape (d, P). Returns (Y, dK).
    """
    if n_penalty * dt > STABILITY_BOUND:
        raise ParameterError(f"n * dt = {n_penalty * dt} exceeds stability bound {STABILITY_BOUND}")
    cont_y = np.asarray(cont_y, dtype=float)
    drv = effective_driver(spec)
    fv = _driver_values(spec, drv, k, t, np.asarray(x_states, float), cont_y, np.asarray(z_est, float))
    y = cont_y + fv * dt
    dK = np.zeros_like(y)
    if spec.d > 1:
        C = spec.costs.C
        gaps = cont_y[:, None, :] - cont_y[None, :, :] + C[:, :, None]
        dK = n_penalty * dt * negative_part(gaps).sum(axis=1)
        y = y + dK
    return y, dK


StepRule = Callable[[np.ndarray, np.ndarray, np.ndarray, float, int], tuple[np.ndarray, np.ndarray]]


def backward_solve(bundle: PathBundle, spec: ProblemSpec, grid: TimeGrid, degree: int,
                   step_rule: StepRule, scheme: str, n_penalty: float = 0.0) -> BackwardSolution:
    """Regression backward induction shared by the penalized and reflected schemes.

    ``step_rule(cont, z, u, t, k)`` receives continuation values, Z estimates
    and unconstrained Euler values ``u = cont + f dt`` (all (d, P_active)) and
    returns (Y, dK).
    """
    if bundle.grid != grid:
        raise SpecError("bundle and grid disagree")
    d, N, P, dt = spec.d, grid.n_steps, bundle.n_paths, grid.dt
    if bundle.d != d:
        raise SpecError("bundle mode count does not match problem")
    t = grid.times
    drv = effective_driver(spec)
    xT = bundle.terminal_states()
    gT = np.empty((d, P))
    for i in range(d):
        gT[i] = eval_located(drv.g, t=t[-1], x=xT[i], mode=i + 1, step=N, what="g")
    Y = np.repeat(gT[:, None, :], N + 1, axis=1)
    Z = np.zeros((d, N + 1, P))
    dK = np.zeros((d, N + 1, P))
    fits = {}
    reduced = []
    # pathwise g + sum (f dt + dK): its sample mean is the t = 0 value because
    # every regression keeps the intercept
    realized = gT.copy()
    workers = min(rng.worker_count(), d)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for k in range(N - 1, -1, -1):
            act = bundle.active(k)
            if not act.any():
                continue
            x = bundle.X[:, k][:, act]
            y_next = Y[:, k + 1][:, act]
            w = bundle.dW[k, act] / dt

            def fit(i):
                cf = condexp_fit(y_next[i], x[i], degree)
                return cf, condexp_fit((y_next[i] - cf(x[i])) * w, x[i], degree)

            results = list(pool.map(fit, range(d))) if pool else [fit(i) for i in range(d)]
            cont = np.empty_like(y_next)
            zz = np.empty_like(y_next)
            for i, (cf, zf) in enumerate(results):
                cont[i] = cf(x[i])
                zz[i] = zf(x[i])
                fits[(i, k)] = (cf, zf)
                if k > 0 and (cf.reduced or zf.reduced):
                    reduced.append((i, k))
            fv = _driver_values(spec, drv, k, t[k], x, cont, zz)
            u = cont + fv * dt
            yk, dk = step_rule(cont, zz, u, t[k], k)
            Y[:, k, act] = yk
            Z[:, k, act] = zz
            dK[:, k, act] = dk
            realized[:, act] += yk - cont
    finally:
        if pool:
            pool.shutdown()
    se = realized.std(axis=1) / np.sqrt(P)
    return BackwardSolution(Y, Z, dK, scheme, grid, spec.costs.C.copy(), degree, n_penalty, fits, reduced, se)


def solve_penalized(bundle: PathBundle, spec: ProblemSpec, grid: TimeGrid, n_penalty: float,
                    degree: int = DEFAULT_DEGREE) -> BackwardSolution:
    if n_penalty < 0:
        raise ParameterError("n_penalty must be non-negative")
    if n_penalty * grid.dt > STABILITY_BOUND:
        raise ParameterError(f"n * dt = {n_penalty * grid.dt} exceeds stability bound {STABILITY_BOUND}")
    C = spec.costs.C
    d = spec.d

    def rule(cont, z, u, t, k):
        if d == 1:
            return u, np.zeros_like(u)
        gaps = cont[:, None, :] - cont[None, :, :] + C[:, :, None]
        pen = n_penalty * grid.dt * negative_part(gaps).sum(axis=1)
        return u + pen, pen

    return backward_solve(bundle, spec, grid, degree, rule, f"penalized({n_penalty:g})", n_penalty)


def pair_gaps(Y: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Y_i - Y_j + C_ij with shape (d, d, N+1, P)."""
    return Y[:, None] - Y[None, :] + C[:, :, None, None]


def penalty_violation_norm(sol: BackwardSolution, lam: float = 0.0) -> dict:
    """Weighted size of the constraint breach, per ordered pair (i, j), 1-based.

    ``sup``: max over k of the path average of e^{lam t_k} |(Y_i - Y_j + C_ij)^-|^2.
    ``integral``: n^2 times the time integral of the same average.
    """
    weights = np.exp(lam * sol.grid.times)
    neg2 = negative_part(pair_gaps(sol.Y, sol.C)) ** 2
    avg = neg2.mean(axis=3) * weights
    d = sol.d
    pairs = {}
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            pairs[(i + 1, j + 1)] = {
                "sup": float(avg[i, j].max()),
                "integral": float(sol.n_penalty**2 * avg[i, j, :-1].sum() * sol.grid.dt),
            }
    sup = max((v["sup"] for v in pairs.values()), default=0.0)
    integral = max((v["integral"] for v in pairs.values()), default=0.0)
    by_mode = [max((v["sup"] for (i, _), v in pairs.items() if i == m + 1), default=0.0) for m in range(d)]
    by_mode_int = [max((v["integral"] for (i, _), v in pairs.items() if i == m + 1), default=0.0) for m in range(d)]
    return {"pairs": pairs, "sup": sup, "integral": integral, "sup_by_mode": by_mode, "integral_by_mode": by_mode_int}


def common_steps(grid_a: TimeGrid, grid_b: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Step indices of the coarser grid's times inside each grid (grids must nest)."""
    if grid_a.t_cap != grid_b.t_cap:
        raise SpecError("grids cover different horizons")
    na, nb = grid_a.n_steps, grid_b.n_steps
    coarse = min(na, nb)
    if na % coarse or nb % coarse:
        raise SpecError(f"grids with {na} and {nb} steps do not nest")
    ks = np.arange(coarse + 1)
    return ks * (na // coarse), ks * (nb // coarse)


def cauchy_gap(sol_n: BackwardSolution, sol_m: BackwardSolution, lam: float = 0.0, per_mode: bool = False):
    """sup over shared times of the path average of e^{lam t}|Y^n - Y^m|^2.

    Solutions must come from the same Brownian paths; grids may differ only by
    refinement, in which case the comparison uses the coarser grid's times.
    """
    if sol_n.Y.shape[0] != sol_m.Y.shape[0] or sol_n.Y.shape[2] != sol_m.Y.shape[2]:
        raise SpecError("solutions differ in mode or path count")
    ka, kb = common_steps(sol_n.grid, sol_m.grid)
    t = sol_n.grid.times[ka]
    diff2 = (sol_n.Y[:, ka] - sol_m.Y[:, kb]) ** 2
    avg = diff2.mean(axis=2) * np.exp(lam * t)
    per = avg.max(axis=1)
    return per if per_mode else float(per.max())
