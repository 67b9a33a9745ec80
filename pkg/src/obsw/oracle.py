"""Exact desk-scale references on a recombining binomial lattice.

``dp_solve`` runs the reflected backward recursion with exact one-step
expectations. ``enumerate_strategies`` searches every adapted switching
strategy on the non-recombining tree of histories, and
``brute_force_feedback`` evaluates every feedback policy one by one for very
small trees.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import exprdsl
from .model import ProblemSpec, girsanov_kernel
from .reflected import reflect

MAX_ENUM_STEPS = 6
MAX_ENUM_MODES = 3
MAX_DP_STEPS = 200
MAX_BRUTE_POLICIES = 1 << 16


class OracleRefusal(ValueError):
    pass


@dataclass
class LatticeModel:
    """Node states ``x[k, m]`` (m <= k) and per-mode values ``V[i, k, m]``; unused slots are NaN."""

    n_steps: int
    dt: float
    sigma: float
    x: np.ndarray
    V: np.ndarray
    i0: int
    absorbed: np.ndarray = field(default=None)

    @property
    def value(self) -> float:
        return float(self.V[self.i0, 0, 0])

    def rows(self):
        """(N, mode, node, value) rows, 1-based modes, node as 'k:m'."""
        for i in range(self.V.shape[0]):
            for k in range(self.n_steps + 1):
                for m in range(k + 1):
                    yield self.n_steps, i + 1, f"{k}:{m}", float(self.V[i, k, m])


def _constant(e, what) -> float:
    if not exprdsl.is_constant(e):
        raise OracleRefusal(f"{what} must be constant on the lattice, got {exprdsl.to_source(e)}")
    return float(exprdsl.evaluate(e))


class _Lattice:
    """Shared one-step machinery for the three oracle routines."""

    def __init__(self, spec: ProblemSpec, N: int):
        c = spec.coeffs
        if len({exprdsl.to_source(s) for s in c.sigma}) != 1:
            raise OracleRefusal("sigma must be mode-independent on the lattice")
        self.sigma = _constant(c.sigma[0], "sigma")
        if spec.switching:
            if self.sigma == 0:
                raise OracleRefusal("switching problems need sigma != 0")
            self.drift = 0.0
            self.f = [exprdsl.BinOp("+", li, exprdsl.BinOp("*", exprdsl.Var("z"), girsanov_kernel(bi, si)))
                      for li, bi, si in zip(c.l, c.b, c.sigma)]
        else:
            if len({exprdsl.to_source(b) for b in c.b}) != 1:
                raise OracleRefusal("general-mode lattice needs a mode-independent drift")
            self.drift = _constant(c.b[0], "b")
            if c.f is None:
                raise OracleRefusal("general mode requires a driver f")
            self.f = list(c.f)
        self.g = c.g
        self.spec = spec
        self.N = N
        self.dt = spec.horizon.t_cap / N
        self.sqdt = math.sqrt(self.dt)
        self.t = np.arange(N + 1) * self.dt
        self.C = spec.costs.C
        self.d = spec.d
        self.lo, self.hi = spec.horizon.exit_lo, spec.horizon.exit_hi

    def state(self, k, m):
        return self.spec.x0 + self.drift * self.t[k] + self.sigma * self.sqdt * (2 * np.asarray(m) - k)

    def outside(self, x):
        out = np.zeros(np.shape(x), dtype=bool)
        if self.lo is not None:
            out |= x <= self.lo
        if self.hi is not None:
            out |= x >= self.hi
        return out

    def terminal(self, x):
        return np.asarray(exprdsl.evaluate(self.g, x=x), dtype=float) * np.ones(np.shape(x))

    def step(self, i, k, x, v_up, v_down):
        """Unconstrained value in mode i one step back from child values."""
        c = 0.5 * (v_up + v_down)
        z = (v_up - v_down) / (2.0 * self.sqdt)
        fv = exprdsl.evaluate(self.f[i], t=self.t[k], x=x, y=c, z=z)
        return c + fv * self.dt


def dp_solve(spec: ProblemSpec, N: Optional[int] = None) -> LatticeModel:
    """Reflected backward recursion on the lattice: average, driver step, reflect."""
    N = N or spec.horizon.n_steps
    if N > MAX_DP_STEPS:
        raise OracleRefusal(f"lattice DP limited to {MAX_DP_STEPS} steps, asked for {N}")
    lat = _Lattice(spec, N)
    d = spec.d
    x = np.full((N + 1, N + 1), np.nan)
    V = np.full((d, N + 1, N + 1), np.nan)
    absorbed = np.zeros((N + 1, N + 1), dtype=bool)
    for k in range(N + 1):
        x[k, : k + 1] = lat.state(k, np.arange(k + 1))
        absorbed[k, : k + 1] = lat.outside(x[k, : k + 1])
    V[:, N, : N + 1] = lat.terminal(x[N, : N + 1])
    for k in range(N - 1, -1, -1):
        xs = x[k, : k + 1]
        u = np.empty((d, k + 1))
        for i in range(d):
            u[i] = lat.step(i, k, xs, V[i, k + 1, 1: k + 2], V[i, k + 1, : k + 1])
        vk = reflect(u, lat.C)[0] if d > 1 else u
        stop = absorbed[k, : k + 1]
        vk[:, stop] = lat.terminal(xs[stop])
        V[:, k, : k + 1] = vk
    return LatticeModel(N, lat.dt, lat.sigma, x, V, spec.i0, absorbed)


@dataclass
class EnumerationResult:
    value: float
    policy: dict  # (history tuple of 0/1 moves, incoming mode) -> chosen mode
    nodes_searched: int
    search_space_log10: float


def _search_space_log10(d: int, N: int) -> float:
    # every (history node, incoming mode) picks one of d modes
    return (2**N - 1) * d * math.log10(d) if d > 1 else 0.0


def enumerate_strategies(spec: ProblemSpec, N: int, max_switches_per_node: int = 1) -> EnumerationResult:
    """Best adapted strategy by exhaustive search over the tree of histories.

    At every history node and incoming mode the search tries every chain of up
    to ``max_switches_per_node`` switches. The objective is the exact
    expectation of g + sum l dt - sum C on the lattice; it is linear in the
    child values with non-negative weights, so the best continuation is
    found independently in each subtree. No projection onto the constraint
    set is used.
    """
    d = spec.d
    if N > MAX_ENUM_STEPS or d > MAX_ENUM_MODES:
        raise OracleRefusal(
            f"enumeration limited to N <= {MAX_ENUM_STEPS}, d <= {MAX_ENUM_MODES}; "
            f"requested N={N}, d={d} (~10^{_search_space_log10(d, N):.1f} adapted strategies)")
    lat = _Lattice(spec, N)
    c = spec.coeffs
    if spec.switching:
        for i in range(d):
            th = abs(_constant(girsanov_kernel(c.b[i], c.sigma[i]), "drift kernel"))
            if th * lat.sqdt > 1:
                raise OracleRefusal("tilted lattice probabilities would be negative; refine N")
    else:
        for fi in c.f:
            if exprdsl.variables(fi) & {"y", "z"}:
                raise OracleRefusal("general-mode enumeration needs a driver free of y and z")
    C = lat.C
    chains = []
    for length in range(0, max_switches_per_node + 1):
        for seq in itertools.product(range(d), repeat=length):
            chains.append(seq)
    policy: dict = {}
    count = 0

    def best(history: tuple, mode_in: int) -> float:
        nonlocal count
        count += 1
        k = len(history)
        m = sum(history)
        xk = float(lat.state(k, m))
        if k == N or lat.outside(np.array(xk)):
            return float(lat.terminal(np.array(xk)))
        cont = {}
        best_val, best_mode = -math.inf, mode_in
        for chain in chains:
            cost, cur, ok = 0.0, mode_in, True
            for nxt in chain:
                if nxt == cur:
                    ok = False
                    break
                cost += C[cur, nxt]
                cur = nxt
            if not ok:
                continue
            if cur not in cont:
                up = best(history + (1,), cur)
                down = best(history + (0,), cur)
                cont[cur] = float(lat.step(cur, k, xk, up, down))
            val = cont[cur] - cost
            if val > best_val:
                best_val, best_mode = val, cur
        policy[(history, mode_in)] = best_mode
        return best_val

    value = best((), spec.i0)
    return EnumerationResult(value, policy, count, _search_space_log10(d, N))


def evaluate_lattice_policy(spec: ProblemSpec, N: int, policy: Callable[[int, int, int], int]) -> float:
    """Exact value of a feedback policy ``policy(k, m, mode) -> mode`` on the lattice."""
    lat = _Lattice(spec, N)
    d = spec.d
    C = lat.C
    W = np.empty((d, N + 1))
    xN = lat.state(N, np.arange(N + 1))
    W[:] = lat.terminal(xN)
    for k in range(N - 1, -1, -1):
        xs = lat.state(k, np.arange(k + 1))
        U = np.empty((d, k + 1))
        for j in range(d):
            U[j] = lat.step(j, k, xs, W[j, 1: k + 2], W[j, : k + 1])
        new = np.empty((d, k + 1))
        stop = lat.outside(xs)
        for m in range(k + 1):
            for i in range(d):
                if stop[m]:
                    new[i, m] = float(lat.terminal(np.array(xs[m])))
                    continue
                j = policy(k, m, i)
                new[i, m] = U[j, m] - C[i, j]
        W = new
    return float(W[spec.i0, 0])


def brute_force_feedback(spec: ProblemSpec, N: int) -> tuple[float, dict]:
    """Evaluate every feedback policy on the recombining lattice; tiny trees only."""
    d = spec.d
    slots = [(k, m, i) for k in range(N) for m in range(k + 1) for i in range(d)]
    n_policies = d ** len(slots)
    if n_policies > MAX_BRUTE_POLICIES:
        raise OracleRefusal(f"{n_policies} feedback policies exceed the limit {MAX_BRUTE_POLICIES}")
    best_val, best_pol = -math.inf, None
    for choice in itertools.product(range(d), repeat=len(slots)):
        table = dict(zip(slots, choice))
        val = evaluate_lattice_policy(spec, N, lambda k, m, i: table[(k, m, i)])
        if val > best_val:
            best_val, best_pol = val, table
    return best_val, best_pol
