"""Least-squares conditional expectations on a polynomial basis in x."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RANK_TOL = 1e-10


@dataclass(frozen=True)
class PolyFit:
    """Fitted polynomial in the standardised state (x - center) / scale."""

    coef: np.ndarray
    center: float
    scale: float
    requested_degree: int

    @property
    def degree(self) -> int:
        return len(self.coef) - 1

    @property
    def reduced(self) -> bool:
        return self.degree < self.requested_degree

    def __call__(self, x) -> np.ndarray:
        u = (np.asarray(x, dtype=float) - self.center) / self.scale
        out = np.full(u.shape, self.coef[-1])
        for c in self.coef[-2::-1]:
            out = out * u + c
        return out


def _design(u: np.ndarray, degree: int) -> np.ndarray:
    return np.vander(u, degree + 1, increasing=True)


def condexp_fit(values, states, degree: int = 2) -> PolyFit:
    """Project ``values`` on {1, x, ..., x^degree} by least squares.

    Drops to a lower degree when the design matrix is numerically rank
    deficient (for example when every state is equal); the returned fit
    records the requested degree so callers can flag the reduction.
    """
    v = np.asarray(values, dtype=float)
    x = np.asarray(states, dtype=float)
    if v.shape != x.shape or v.ndim != 1:
        raise ValueError("values and states must be equal-length vectors")
    n = v.size
    if n == 0:
        return PolyFit(np.zeros(1), 0.0, 1.0, degree)
    if v.min() == v.max():
        # exact for a constant sample; the sample mean could be off in the last place
        coef = np.zeros(degree + 1)
        coef[0] = v[0]
        return PolyFit(coef, 0.0, 1.0, degree)
    center = float(x.mean())
    scale = float(x.std())
    if not scale > 1e-12 * (1.0 + abs(center)):
        return PolyFit(np.array([v.mean()]), center, 1.0, degree)
    u = (x - center) / scale
    deg = min(degree, n - 1)
    while deg > 0:
        q, r = np.linalg.qr(_design(u, deg))
        diag = np.abs(np.diag(r))
        if diag.min() > RANK_TOL * diag.max() * np.sqrt(n):
            coef = np.linalg.solve(r, q.T @ v)
            return PolyFit(coef, center, scale, degree)
        deg -= 1
    return PolyFit(np.array([v.mean()]), center, scale, degree)
