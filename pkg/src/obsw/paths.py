"""Forward path engine: Euler-Maruyama per mode, exit detection, Girsanov weights."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import exprdsl, rng
from .exprdsl import EvalError
from .model import ProblemSpec, SpecError, girsanov_kernel


class SimulationError(RuntimeError):
    def __init__(self, message, mode=None, step=None, path=None):
        self.mode, self.step, self.path = mode, step, path
        super().__init__(f"{message} (mode {mode}, step {step}, path {path})")


@dataclass(frozen=True)
class TimeGrid:
    t_cap: float
    n_steps: int

    def __post_init__(self):
        if not self.t_cap > 0 or self.n_steps < 1:
            raise SpecError("time grid needs t_cap > 0 and n_steps >= 1")

    @property
    def dt(self) -> float:
        return self.t_cap / self.n_steps

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.t_cap
        return t

    @classmethod
    def for_spec(cls, spec: ProblemSpec, n_steps: Optional[int] = None) -> "TimeGrid":
        return cls(spec.horizon.t_cap, n_steps or spec.horizon.n_steps)


@dataclass(frozen=True)
class PathBundle:
    """Simulated paths. Arrays: dW (N, P), X (d, N+1, P), kappa (P,), dG (d, N, P) or None.

    In switching mode the states are simulated under the driftless reference
    measure and ``dG`` holds the per-mode log-density increments.
    """

    grid: TimeGrid
    seed: int
    dW: np.ndarray
    X: np.ndarray
    kappa: np.ndarray
    dG: Optional[np.ndarray] = None
    reference_measure: bool = False

    @property
    def n_paths(self) -> int:
        return self.dW.shape[1]

    @property
    def d(self) -> int:
        return self.X.shape[0]

    def active(self, k: int) -> np.ndarray:
        return k < self.kappa

    def terminal_states(self) -> np.ndarray:
        """X[i][kappa[p]][p] for every mode, shape (d, P)."""
        idx = np.arange(self.n_paths)
        return self.X[:, self.kappa, idx]


def eval_located(expr, *, t, x, y=0.0, z=0.0, mode=None, step=None, what="coefficient"):
    """Vectorised evaluation that reports the first failing path on error."""
    try:
        out = exprdsl.evaluate(expr, t=t, x=x, y=y, z=z)
    except EvalError as exc:
        xs, ys, zs = (np.broadcast_to(v, np.shape(x)) for v in (x, y, z))
        for p in range(np.size(x)):
            try:
                exprdsl.evaluate(expr, t=t, x=float(xs.flat[p]), y=float(ys.flat[p]), z=float(zs.flat[p]))
            except EvalError as inner:
                raise SimulationError(f"{what} evaluation failed: {inner}", mode, step, p) from exc
        raise SimulationError(f"{what} evaluation failed: {exc}", mode, step, None) from exc
    return np.broadcast_to(np.asarray(out, dtype=float), np.shape(x))


def _in_band(x, lo, hi):
    ok = np.ones(np.shape(x), dtype=bool)
    if lo is not None:
        ok &= x > lo
    if hi is not None:
        ok &= x < hi
    return ok


def brownian_increments(seed: int, grid: TimeGrid, n_paths: int) -> np.ndarray:
    return rng.standard_normals(seed, grid.n_steps, n_paths) * np.sqrt(grid.dt)


def coarsen_increments(dW: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` fine increments."""
    n, p = dW.shape
    if n % factor:
        raise SpecError(f"cannot coarsen {n} steps by {factor}")
    return dW.reshape(n // factor, factor, p).sum(axis=1)


def simulate_forward(spec: ProblemSpec, grid: TimeGrid, n_paths: int, seed: int,
                     dW: Optional[np.ndarray] = None) -> PathBundle:
    """Euler-Maruyama for every mode driven by one Brownian motion.

    Paths freeze from the first step at which the initial-mode state leaves
    ``(exit_lo, exit_hi)``. Switching problems are simulated without drift.
    """
    if n_paths < 1:
        raise SpecError("n_paths must be >= 1")
    if dW is None:
        dW = brownian_increments(seed, grid, n_paths)
    elif dW.shape != (grid.n_steps, n_paths):
        raise SpecError(f"increments have shape {dW.shape}, expected {(grid.n_steps, n_paths)}")
    N, dt, t = grid.n_steps, grid.dt, grid.times
    d = spec.d
    lo, hi = spec.horizon.exit_lo, spec.horizon.exit_hi
    switching = spec.switching
    sigma_min = spec.hypothesis.sigma_min
    # driftless reference dynamics are mode-independent: simulate one state and share it
    n_sim = 1 if switching else d
    X = np.empty((n_sim, N + 1, n_paths))
    X[:, 0, :] = spec.x0
    i0 = 0 if switching else spec.i0
    alive = _in_band(X[i0, 0], lo, hi)
    kappa = np.where(alive, N, 0)
    for k in range(N):
        for i in range(n_sim):
            x = X[i, k]
            sig = eval_located(spec.coeffs.sigma[i], t=t[k], x=x, mode=i + 1, step=k, what="sigma")
            if switching:
                if sigma_min is not None and np.any(np.abs(sig[alive]) < sigma_min):
                    p = int(np.flatnonzero(alive & (np.abs(sig) < sigma_min))[0])
                    raise SimulationError("sigma below declared floor", i + 1, k, p)
                step = sig * dW[k]
            else:
                drift = eval_located(spec.coeffs.b[i], t=t[k], x=x, mode=i + 1, step=k, what="b")
                step = drift * dt + sig * dW[k]
            X[i, k + 1] = np.where(alive, x + step, x)
        exited = alive & ~_in_band(X[i0, k + 1], lo, hi)
        kappa[exited] = k + 1
        alive = alive & ~exited
    if switching:
        X = np.broadcast_to(X, (d, N + 1, n_paths))
    else:
        X.setflags(write=False)
    dG = _log_density_increments(spec, grid, X, dW, kappa) if switching else None
    return PathBundle(grid, seed, dW, X, kappa, dG, reference_measure=switching)


def kernel_values(spec: ProblemSpec, k: int, t: float, x, mode: int) -> np.ndarray:
    kernel = girsanov_kernel(spec.coeffs.b[mode], spec.coeffs.sigma[mode])
    return eval_located(kernel, t=t, x=x, mode=mode + 1, step=k, what="drift kernel")


def _log_density_increments(spec, grid, X, dW, kappa) -> np.ndarray:
    d, N = spec.d, grid.n_steps
    t = grid.times
    out = np.zeros((d, N, dW.shape[1]))
    for k in range(N):
        live = k < kappa
        for i in range(d):
            th = kernel_values(spec, k, t[k], X[i, k], i)
            out[i, k] = np.where(live, th * dW[k] - 0.5 * th * th * grid.dt, 0.0)
    return out


def girsanov_logweight(bundle: PathBundle, mode_path: np.ndarray, spec: ProblemSpec) -> np.ndarray:
    """Log density of the controlled measure along per-step mode labels (N, P), 0-based.

    Sum over k < kappa of theta_k dW_k - theta_k^2 dt / 2, with theta the drift
    kernel of the active mode.
    """
    mode_path = np.asarray(mode_path)
    N, P = bundle.grid.n_steps, bundle.n_paths
    if mode_path.shape != (N, P):
        raise SpecError(f"mode path has shape {mode_path.shape}, expected {(N, P)}")
    if bundle.dG is not None:
        picked = np.take_along_axis(bundle.dG, mode_path[None], axis=0)[0]
        return picked.sum(axis=0)
    t = bundle.grid.times
    total = np.zeros(P)
    for k in range(N):
        live = k < bundle.kappa
        for i in range(bundle.d):
            sel = live & (mode_path[k] == i)
            if not sel.any():
                continue
            th = kernel_values(spec, k, t[k], bundle.X[i, k, sel], i)
            total[sel] += th * bundle.dW[k, sel] - 0.5 * th * th * bundle.grid.dt
    return total


_MAGIC = b"OBSWPB01"
_HEADER = struct.Struct("<8s4Q2d")


def dump_bundle(bundle: PathBundle, path) -> None:
    """Write dims, seed and flat little-endian doubles: dW, X, kappa."""
    N, P, d = bundle.grid.n_steps, bundle.n_paths, bundle.d
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, d, N, P, bundle.seed, bundle.grid.t_cap, float(bundle.reference_measure)))
        for arr in (bundle.dW, bundle.X, bundle.kappa):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_bundle(path, spec: Optional[ProblemSpec] = None) -> PathBundle:
    raw = Path(path).read_bytes()
    magic, d, N, P, seed, t_cap, ref = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise SpecError("not a path bundle dump")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    dW = body[: N * P].reshape(N, P)
    X = body[N * P: N * P + d * (N + 1) * P].reshape(d, N + 1, P)
    kappa = body[N * P + d * (N + 1) * P:].astype(np.int64)
    grid = TimeGrid(t_cap, N)
    dG = None
    if spec is not None and spec.switching:
        dG = _log_density_increments(spec, grid, X, dW, kappa)
    return PathBundle(grid, seed, dW, X, kappa, dG, reference_measure=bool(ref))
