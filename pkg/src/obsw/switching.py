"""Optimal strategy extraction and Monte Carlo profit estimation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .model import ProblemSpec, SpecError, effective_driver
from .paths import PathBundle, TimeGrid, _in_band, brownian_increments, eval_located, kernel_values
from .penalized import BackwardSolution, negative_part
from .reflected import reflect

CONTROLLED = "controlled-drift"
GIRSANOV = "girsanov"


class EstimatorRefused(ValueError):
    pass


@dataclass
class Strategy:
    """Per-path switching decisions on a grid.

    ``modes[k, p]`` is the (0-based) mode in force during step k, after any
    switch decided at t_k; ``step_costs[k, p]`` is the cost paid at t_k.
    """

    modes: np.ndarray
    step_costs: np.ndarray
    i0: int

    @property
    def switched(self) -> np.ndarray:
        prev = np.vstack([np.full((1, self.modes.shape[1]), self.i0), self.modes[:-1]])
        return self.modes != prev

    @property
    def switch_count(self) -> np.ndarray:
        return self.switched.sum(axis=0)

    @property
    def total_cost(self) -> np.ndarray:
        return self.step_costs.sum(axis=0)

    def switches(self, p: int) -> list[tuple[int, int, int]]:
        """(step, from, to) triples for path p, 0-based modes."""
        out = []
        prev = self.i0
        for k in np.flatnonzero(self.switched[:, p]):
            out.append((int(k), int(prev), int(self.modes[k, p])))
            prev = int(self.modes[k, p])
        return out

    def as_policy(self) -> "Policy":
        return SchedulePolicy(self)


Policy = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def default_tol(sol: BackwardSolution) -> float:
    return 1e-9 * (1.0 + float(np.abs(sol.y0).max()))


def _switch_decision(Y: np.ndarray, mode: np.ndarray, C: np.ndarray, tol: float) -> np.ndarray:
    """New mode per path given the value field Y (d, P) and current modes."""
    d, P = Y.shape
    if d == 1:
        return mode
    idx = np.arange(P)
    cand = Y - C[mode].T
    cand[mode, idx] = -np.inf
    best = cand.argmax(axis=0)  # smallest index on ties
    switch = Y[mode, idx] <= cand[best, idx] + tol
    return np.where(switch, best, mode)


def _build_strategy(policy: Policy, X: Callable[[int], np.ndarray], kappa, N: int, i0: int, C) -> Strategy:
    P = kappa.shape[0]
    modes = np.empty((N, P), dtype=np.int64)
    costs = np.zeros((N, P))
    cur = np.full(P, i0, dtype=np.int64)
    for k in range(N):
        live = k < kappa
        new = np.where(live, policy(k, X(k), cur), cur)
        costs[k] = C[cur, new]
        modes[k] = new
        cur = new
    return Strategy(modes, costs, i0)


def extract_strategy(sol: BackwardSolution, bundle: PathBundle, i0: int, tol: Optional[float] = None) -> Strategy:
    """Switch whenever the current mode's value touches its obstacle, to the best alternative."""
    if tol is None:
        tol = default_tol(sol)
    if tol < 0:
        raise ValueError("tol must be non-negative")

    def policy(k, _x, mode):
        return _switch_decision(sol.Y[:, k, :], mode, sol.C, tol)

    return _build_strategy(policy, lambda k: None, bundle.kappa, sol.grid.n_steps, i0, sol.C)


class SchedulePolicy:
    """Replay a pathwise strategy; valid on paths driven by the same Brownian increments."""

    def __init__(self, strategy: Strategy):
        self.strategy = strategy

    def __call__(self, k, x, mode):
        if x.shape[0] != self.strategy.modes.shape[1]:
            raise SpecError("schedule has a different path count")
        return self.strategy.modes[k]


class FieldPolicy:
    """Feedback rule from a solved value field re-evaluated at the current state.

    Uses the stored per-step regressions, so it can run on fresh paths.
    """

    def __init__(self, sol: BackwardSolution, spec: ProblemSpec, tol: Optional[float] = None, shift: float = 0.0):
        if not sol.fits:
            raise SpecError("solution carries no regression fits")
        self.sol = sol
        self.spec = spec
        self.drv = effective_driver(spec)
        self.tol = default_tol(sol) if tol is None else tol
        self.shift = shift

    def values(self, k: int, x: np.ndarray) -> np.ndarray:
        sol, d = self.sol, self.sol.d
        t = sol.grid.times[k]
        dt = sol.grid.dt
        cont = np.empty((d, x.size))
        u = np.empty_like(cont)
        for i in range(d):
            cf, zf = sol.fits[(i, k)]
            cont[i] = cf(x)
            z = zf(x)
            fv = eval_located(self.drv.f[i], t=t, x=x, y=cont[i], z=z, mode=i + 1, step=k, what="driver")
            u[i] = cont[i] + fv * dt
        if d == 1:
            return u
        if sol.penalized:
            gaps = cont[:, None, :] - cont[None, :, :] + sol.C[:, :, None]
            return u + sol.n_penalty * dt * negative_part(gaps).sum(axis=1)
        return reflect(u, sol.C)[0]

    def __call__(self, k, x, mode):
        return _switch_decision(self.values(k, x), mode, self.sol.C, self.tol + self.shift)


class NeverSwitch:
    def __call__(self, k, x, mode):
        return mode


class AlwaysSwitch:
    """Move to the next mode (cyclically) at every step."""

    def __init__(self, d: int):
        self.d = d

    def __call__(self, k, x, mode):
        return (mode + 1) % self.d


class RandomFlip:
    """Follow ``base`` but jump to a uniformly drawn other mode with probability ``prob``."""

    def __init__(self, base: Policy, d: int, prob: float, seed: int):
        self.base, self.d, self.prob, self.seed = base, d, prob, seed

    def __call__(self, k, x, mode):
        new = self.base(k, x, mode)
        if self.d == 1:
            return new
        u_flip = rng.uniform_row(self.seed, 2 * k, x.size, stream=7)
        u_pick = rng.uniform_row(self.seed, 2 * k + 1, x.size, stream=7)
        other = (new + 1 + (u_pick * (self.d - 1)).astype(np.int64)) % self.d
        return np.where(u_flip < self.prob, other, new)


@dataclass
class ProfitEstimate:
    mean: float
    se: float
    estimator: str
    strategy: Strategy
    payoff: np.ndarray
    weight: Optional[np.ndarray] = None

    @property
    def weight_mean(self) -> float:
        return 1.0 if self.weight is None else float(self.weight.mean())

    @property
    def weight_se(self) -> float:
        return 0.0 if self.weight is None else float(self.weight.std() / np.sqrt(self.weight.size))


def _check_bound(values, bound, what, k):
    if bound is not None and np.any(np.abs(values) > bound * (1 + 1e-12)):
        raise EstimatorRefused(f"{what} exceeds declared bound {bound} at step {k}")


def estimate_profit(spec: ProblemSpec, policy, grid: TimeGrid, n_paths: int, seed: int,
                    estimator: str = CONTROLLED) -> ProfitEstimate:
    """Monte Carlo estimate of the total profit g(X) + sum l dt - sum C.

    ``controlled-drift`` simulates dX = b dt + sigma dW under the controlled
    measure; ``girsanov`` simulates the driftless state and reweights by the
    density of the controlled measure.
    """
    if not spec.switching:
        raise SpecError("profit estimation needs a switching problem")
    if estimator not in (CONTROLLED, GIRSANOV):
        raise ValueError(f"unknown estimator {estimator!r}")
    hyp = spec.hypothesis
    if estimator == GIRSANOV and (hyp.sigma_min is None or hyp.b_bound is None):
        raise EstimatorRefused("girsanov estimator needs a declared sigma floor and drift bound (Hypothesis 5.1(iv)-(v))")
    if isinstance(policy, Strategy):
        policy = SchedulePolicy(policy)
    c = spec.coeffs
    C = spec.costs.C
    N, dt, t = grid.n_steps, grid.dt, grid.times
    lo, hi = spec.horizon.exit_lo, spec.horizon.exit_hi
    dW = brownian_increments(seed, grid, n_paths)
    x = np.full(n_paths, spec.x0)
    alive = _in_band(x, lo, hi)
    kappa = np.where(alive, N, 0)
    cur = np.full(n_paths, spec.i0, dtype=np.int64)
    modes = np.empty((N, n_paths), dtype=np.int64)
    costs = np.zeros((N, n_paths))
    running = np.zeros(n_paths)
    logw = np.zeros(n_paths)
    for k in range(N):
        new = np.where(alive, policy(k, x, cur), cur)
        costs[k] = C[cur, new]
        modes[k] = new
        cur = new
        sig = eval_located(c.sigma[0], t=t[k], x=x, step=k, what="sigma")
        if hyp.sigma_min is not None and np.any(np.abs(sig[alive]) < hyp.sigma_min):
            raise EstimatorRefused(f"sigma below declared floor at step {k}")
        drift = np.empty(n_paths)
        reward = np.empty(n_paths)
        theta = np.empty(n_paths)
        for i in range(spec.d):
            sel = cur == i
            if not sel.any():
                continue
            drift[sel] = eval_located(c.b[i], t=t[k], x=x[sel], mode=i + 1, step=k, what="b")
            reward[sel] = eval_located(c.l[i], t=t[k], x=x[sel], mode=i + 1, step=k, what="l")
            if estimator == GIRSANOV:
                theta[sel] = kernel_values(spec, k, t[k], x[sel], i)
        running += np.where(alive, reward * dt, 0.0)
        if estimator == CONTROLLED:
            step = drift * dt + sig * dW[k]
        else:
            _check_bound(drift[alive], hyp.b_bound, "b", k)
            logw += np.where(alive, theta * dW[k] - 0.5 * theta**2 * dt, 0.0)
            step = sig * dW[k]
        x = np.where(alive, x + step, x)
        exited = alive & ~_in_band(x, lo, hi)
        kappa[exited] = k + 1
        alive &= ~exited
    payoff = eval_located(c.g, t=t[-1], x=x, step=N, what="g") + running - costs.sum(axis=0)
    strategy = Strategy(modes, costs, spec.i0)
    if estimator == GIRSANOV:
        w = np.exp(logw)
        vals = w * payoff
        return ProfitEstimate(float(vals.mean()), float(vals.std() / np.sqrt(n_paths)), estimator, strategy, payoff, w)
    return ProfitEstimate(float(payoff.mean()), float(payoff.std() / np.sqrt(n_paths)), estimator, strategy, payoff)


def random_perturbations(base: FieldPolicy, d: int, count: int, seed: int) -> list[tuple[str, Policy]]:
    """Randomly parameterised perturbations of an optimal feedback rule.

    Alternates threshold shifts (switch too eagerly or too late) with random
    mode flips; parameters come from a seeded generator.
    """
    gen = np.random.default_rng(seed)
    out = []
    for n in range(count):
        if n % 2 == 0:
            shift = float(gen.uniform(-0.3, 0.3))
            out.append((f"threshold{shift:+.3f}", FieldPolicy(base.sol, base.spec, base.tol, shift)))
        else:
            prob = float(gen.uniform(0.02, 0.3))
            out.append((f"flip{prob:.3f}", RandomFlip(base, d, prob, int(gen.integers(2**31)))))
    return out


def standard_perturbations(base: FieldPolicy, d: int, seed: int, n_random: int = 5) -> list[tuple[str, Policy]]:
    return [("never-switch", NeverSwitch()), ("always-switch", AlwaysSwitch(d))] + \
        random_perturbations(base, d, n_random, seed)


@dataclass
class ImprovementReport:
    optimal: ProfitEstimate
    rows: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r["ok"] for r in self.rows)


def policy_improvement_check(spec: ProblemSpec, sol: BackwardSolution, grid: TimeGrid, n_paths: int, seed: int,
                             perturbations: Sequence[tuple[str, Policy]], estimator: str = CONTROLLED,
                             n_se: float = 3.0) -> ImprovementReport:
    """Check J(alpha) <= J(alpha*) + n_se combined standard errors for each perturbation.

    Every strategy is evaluated on the same seed (common random numbers).
    """
    star = estimate_profit(spec, FieldPolicy(sol, spec), grid, n_paths, seed, estimator)
    report = ImprovementReport(star)
    for name, pol in perturbations:
        est = estimate_profit(spec, pol, grid, n_paths, seed, estimator)
        se = float(np.hypot(est.se, star.se))
        report.rows.append({
            "name": name, "J": est.mean, "se": est.se, "J_star": star.mean, "se_star": star.se,
            "margin": star.mean - est.mean, "combined_se": se,
            "ok": bool(est.mean <= star.mean + n_se * se),
            "mean_switches": float(est.strategy.switch_count.mean()),
        })
    return report


def strategy_lines(strategy: Strategy, profit: Optional[np.ndarray] = None):
    """JSON lines {path, switches: [{k, from, to}], profit} with 1-based modes."""
    for p in range(strategy.modes.shape[1]):
        rec = {"path": p, "switches": [{"k": k, "from": a + 1, "to": b + 1} for k, a, b in strategy.switches(p)]}
        if profit is not None:
            rec["profit"] = float(profit[p])
        yield json.dumps(rec)
