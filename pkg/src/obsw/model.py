"""Problem definition, hypothesis validators and JSON ingestion."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import exprdsl
from .exprdsl import BinOp, Expr, Var

GENERAL = "general"
SWITCHING = "switching"

_ALLOWED_VARS = {
    "b": {"t", "x"},
    "sigma": {"t", "x"},
    "l": {"t", "x"},
    "f": {"t", "x", "y", "z"},
    "g": {"x"},
}


class SpecError(ValueError):
    """Structural or semantic problem with a problem definition."""


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class Violation:
    hypothesis: str
    message: str
    triple: Optional[tuple[int, ...]] = None


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    warnings: list[Violation] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations

    def extend(self, other: "ValidationReport") -> None:
        self.violations.extend(other.violations)
        self.warnings.extend(other.warnings)

    def lines(self) -> list[str]:
        out = [f"FAIL [{v.hypothesis}] {v.message}" for v in self.violations]
        out += [f"WARN [{w.hypothesis}] {w.message}" for w in self.warnings]
        return out


@dataclass(frozen=True)
class SwitchingCostMatrix:
    C: np.ndarray
    strict: bool = False

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float)
        if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] < 1:
            raise SpecError(f"cost matrix must be d x d with d >= 1, got shape {C.shape}")
        C.setflags(write=False)
        object.__setattr__(self, "C", C)

    @property
    def d(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class CoefficientSpec:
    """Per-mode coefficient expressions and declared hypothesis constants.

    ``f`` and ``l`` are optional: switching problems give ``l`` and build ``f``
    from it, general problems give ``f`` directly.
    """

    b: tuple[Expr, ...]
    sigma: tuple[Expr, ...]
    g: Expr
    f: Optional[tuple[Expr, ...]] = None
    l: Optional[tuple[Expr, ...]] = None
    mu1: float = 0.0
    mu2: float = 0.0
    mu3: float = 0.0
    k2: float = 0.0
    u_max: float = 0.0


@dataclass(frozen=True)
class HorizonSpec:
    t_cap: float
    n_steps: int
    exit_lo: Optional[float] = None
    exit_hi: Optional[float] = None
    lam: float = 0.0

    def __post_init__(self):
        if not self.t_cap > 0:
            raise SpecError("t_cap must be positive")
        if self.n_steps < 1:
            raise SpecError("n_steps must be >= 1")
        if self.exit_lo is not None and self.exit_hi is not None and not self.exit_lo < self.exit_hi:
            raise SpecError("exit_lo must be below exit_hi")

    @property
    def has_exit(self) -> bool:
        return self.exit_lo is not None or self.exit_hi is not None

    def tail_weight(self) -> float:
        """Discount weight exp(lambda * t_cap) at the truncation horizon."""
        return math.exp(self.lam * self.t_cap)


@dataclass(frozen=True)
class Hypothesis:
    epsilon: float = 0.1
    rho: float = 0.5
    sigma_min: Optional[float] = None
    b_bound: Optional[float] = None
    c_u: Optional[float] = None


@dataclass(frozen=True)
class ProblemSpec:
    x0: float
    costs: SwitchingCostMatrix
    coeffs: CoefficientSpec
    horizon: HorizonSpec
    i0: int = 0  # 0-based; the JSON document uses 1-based labels
    application_mode: str = GENERAL
    hypothesis: Hypothesis = field(default_factory=Hypothesis)

    @property
    def d(self) -> int:
        return self.costs.d

    @property
    def switching(self) -> bool:
        return self.application_mode == SWITCHING

    def with_costs(self, C, strict=None) -> "ProblemSpec":
        strict = self.costs.strict if strict is None else strict
        return replace(self, costs=SwitchingCostMatrix(np.asarray(C, float), strict))

    def with_horizon(self, **kw) -> "ProblemSpec":
        return replace(self, horizon=replace(self.horizon, **kw))


def default_c_u(u_max: float) -> float:
    """Constant depending on u in the lambda window: u + 5 u^2 at the bound."""
    return u_max + 5.0 * u_max**2


def validate_costs(costs) -> ValidationReport:
    """Check sign, zero diagonal and the (weak or strict) triangle inequality.

    Triples in the report are 1-based mode labels ``(i, j, l)``.
    """
    if not isinstance(costs, SwitchingCostMatrix):
        costs = SwitchingCostMatrix(costs)
    C = costs.C
    d = costs.d
    report = ValidationReport()
    for i, j in product(range(d), repeat=2):
        if C[i, j] < 0:
            report.violations.append(
                Violation("Hypothesis 3.1(i)", f"C[{i+1}][{j+1}] = {C[i, j]} < 0", (i + 1, j + 1)))
        if not math.isfinite(C[i, j]):
            report.violations.append(Violation("Hypothesis 3.1(i)", f"C[{i+1}][{j+1}] not finite", (i + 1, j + 1)))
    for i in range(d):
        if C[i, i] != 0:
            report.violations.append(Violation("convention", f"C[{i+1}][{i+1}] = {C[i, i]} != 0", (i + 1, i + 1)))
    for i, j, l in product(range(d), repeat=3):
        if i == j or j == l:
            continue
        lhs = C[i, j] + C[j, l]
        if lhs < C[i, l]:
            report.violations.append(Violation(
                "Hypothesis 3.1(ii)", f"C[{i+1}][{j+1}] + C[{j+1}][{l+1}] = {lhs} < C[{i+1}][{l+1}] = {C[i, l]}",
                (i + 1, j + 1, l + 1)))
        elif costs.strict and not lhs > C[i, l]:
            report.violations.append(Violation(
                "Hypothesis k'", f"C[{i+1}][{j+1}] + C[{j+1}][{l+1}] = {lhs} not > C[{i+1}][{l+1}] = {C[i, l]}",
                (i + 1, j + 1, l + 1)))
    return report


def lambda_window(mu1, mu2, u_max, eps, rho, c_u=None) -> tuple[float, float]:
    if not eps > 0:
        raise ParameterError("epsilon must be positive")
    if not 0 < rho < 1:
        raise ParameterError("rho must lie in (0, 1)")
    if u_max < 0:
        raise ParameterError("u_max must be non-negative")
    if c_u is None:
        c_u = default_c_u(u_max)
    lo = c_u / eps + 2 * mu2 * u_max + 2 * u_max**2 / rho + 2 * eps
    hi = -2 * mu1 - u_max
    return lo, hi


def validate_lambda_window(mu1, mu2, u_max, eps, rho, lam, c_u=None) -> bool:
    lo, hi = lambda_window(mu1, mu2, u_max, eps, rho, c_u)
    return lo < lam < hi


def girsanov_kernel(b: Expr, sigma: Expr) -> Expr:
    """Drift kernel sigma^{-1} b of the change of measure (b itself when sigma == 1)."""
    if sigma == exprdsl.Num(1.0) or b == exprdsl.Num(0.0):
        return b
    return BinOp("/", b, sigma)


def effective_driver(spec: ProblemSpec) -> CoefficientSpec:
    """Driver used by the backward schemes.

    In switching mode the driver is ``l + z * sigma^{-1} b`` and ignores ``y``;
    in general mode the coefficients are returned unchanged.
    """
    c = spec.coeffs
    if not spec.switching:
        if c.f is None:
            raise SpecError("general mode requires a driver f")
        return c
    if c.l is None or c.b is None:
        raise SpecError("switching mode requires l and b")
    f = tuple(
        BinOp("+", li, BinOp("*", Var("z"), girsanov_kernel(bi, si)))
        for li, bi, si in zip(c.l, c.b, c.sigma)
    )
    return replace(c, f=f)


def check_expressions(coeffs: CoefficientSpec) -> ValidationReport:
    report = ValidationReport()
    groups = {"b": coeffs.b, "sigma": coeffs.sigma, "g": (coeffs.g,), "f": coeffs.f, "l": coeffs.l}
    for name, exprs in groups.items():
        if exprs is None:
            continue
        for i, e in enumerate(exprs):
            extra = exprdsl.variables(e) - _ALLOWED_VARS[name]
            if extra:
                report.violations.append(Violation(
                    "(H1)", f"{name}[{i+1}] references {sorted(extra)}; allowed {sorted(_ALLOWED_VARS[name])}"))
    for name in ("mu1", "mu2", "mu3", "k2", "u_max"):
        if not math.isfinite(getattr(coeffs, name)):
            report.violations.append(Violation("(H3)-(H5)", f"{name} is not finite"))
    if coeffs.u_max < 0:
        report.violations.append(Violation("(H3)", "u_max must be >= 0"))
    return report


def check_problem(spec: ProblemSpec) -> ValidationReport:
    """Every structural and declared-constant check on a problem."""
    report = validate_costs(spec.costs)
    report.extend(check_expressions(spec.coeffs))
    c, h, hyp = spec.coeffs, spec.horizon, spec.hypothesis
    if not 0 <= spec.i0 < spec.d:
        report.violations.append(Violation("definition", f"i0 = {spec.i0 + 1} not in 1..{spec.d}"))
    try:
        ok = validate_lambda_window(c.mu1, c.mu2, c.u_max, hyp.epsilon, hyp.rho, h.lam, hyp.c_u)
        lo, hi = lambda_window(c.mu1, c.mu2, c.u_max, hyp.epsilon, hyp.rho, hyp.c_u)
        if not ok:
            item = Violation("(H6)", f"lambda = {h.lam} outside window ({lo:.6g}, {hi:.6g})")
            # a deterministic horizon needs no discounted integrability: all weights are equivalent on [0, t_cap]
            (report.violations if h.has_exit else report.warnings).append(item)
    except ParameterError as exc:
        report.violations.append(Violation("(H6)", str(exc)))
    if spec.switching:
        if c.l is None:
            report.violations.append(Violation("definition", "switching mode requires l"))
        if len({exprdsl.to_source(s) for s in c.sigma}) != 1:
            report.violations.append(Violation("Hypothesis 5.1(iv)", "sigma must be mode-independent"))
        if hyp.sigma_min is None or not hyp.sigma_min > 0:
            report.violations.append(Violation("Hypothesis 5.1(iv)", "positive sigma floor sigma_min must be declared"))
        elif exprdsl.is_constant(c.sigma[0]) and abs(float(exprdsl.evaluate(c.sigma[0]))) < hyp.sigma_min:
            report.violations.append(Violation("Hypothesis 5.1(iv)", "constant sigma below declared floor"))
        if hyp.b_bound is None or not math.isfinite(hyp.b_bound):
            report.violations.append(Violation("Hypothesis 5.1(v)", "bound on b must be declared"))
        else:
            for i, bi in enumerate(c.b):
                if exprdsl.is_constant(bi) and abs(float(exprdsl.evaluate(bi))) > hyp.b_bound:
                    report.violations.append(Violation("Hypothesis 5.1(v)", f"|b[{i+1}]| exceeds declared bound"))
    elif c.f is None:
        report.violations.append(Violation("definition", "general mode requires f"))
    if h.has_exit:
        report.warnings.append(Violation(
            "tail", f"terminal time truncated at t_cap = {h.t_cap}; discount weight exp(lambda t_cap) = {h.tail_weight():.6g}"))
    return report


def _expr_list(raw, d: int, name: str) -> Optional[tuple[Expr, ...]]:
    if raw is None:
        return None
    if isinstance(raw, (str, int, float)):
        raw = [raw]
    if len(raw) == 1:
        raw = list(raw) * d
    if len(raw) != d:
        raise SpecError(f"coefficients.{name} must have 1 or {d} entries, got {len(raw)}")
    return tuple(exprdsl.parse(str(s)) for s in raw)


def problem_from_dict(doc: dict) -> ProblemSpec:
    try:
        d = int(doc["modes"])
        costs = np.asarray(doc["costs"], dtype=float)
        if costs.ndim == 1:
            if costs.size != d * d:
                raise SpecError(f"costs must have {d * d} entries")
            costs = costs.reshape(d, d)
        if costs.shape != (d, d):
            raise SpecError(f"costs must be {d}x{d}")
        hz = doc["horizon"]
        co = doc["coefficients"]
        hy = doc.get("hypothesis", {})
        horizon = HorizonSpec(
            t_cap=float(hz["t_cap"]), n_steps=int(hz["n_steps"]),
            exit_lo=hz.get("exit_lo"), exit_hi=hz.get("exit_hi"), lam=float(hz.get("lambda", 0.0)))
        coeffs = CoefficientSpec(
            b=_expr_list(co["b"], d, "b"), sigma=_expr_list(co["sigma"], d, "sigma"),
            g=exprdsl.parse(str(co["g"])),
            f=_expr_list(co.get("f"), d, "f"), l=_expr_list(co.get("l"), d, "l"),
            mu1=float(hy.get("mu1", 0.0)), mu2=float(hy.get("mu2", 0.0)), mu3=float(hy.get("mu3", 0.0)),
            k2=float(hy.get("k2", 0.0)), u_max=float(hy.get("u_max", 0.0)))
        hypothesis = Hypothesis(
            epsilon=float(hy.get("epsilon", 0.1)), rho=float(hy.get("rho", 0.5)),
            sigma_min=hy.get("sigma_min"), b_bound=hy.get("b_bound"), c_u=hy.get("c_u"))
        mode = doc.get("application_mode", GENERAL)
        if mode not in (GENERAL, SWITCHING):
            raise SpecError(f"application_mode must be {GENERAL!r} or {SWITCHING!r}")
        return ProblemSpec(
            x0=float(doc["x0"]), costs=SwitchingCostMatrix(costs, bool(hy.get("strict_costs", False))),
            coeffs=coeffs, horizon=horizon, i0=int(doc.get("i0", 1)) - 1,
            application_mode=mode, hypothesis=hypothesis)
    except KeyError as exc:
        raise SpecError(f"missing key {exc.args[0]!r} in problem document") from None


def load_problem(path) -> ProblemSpec:
    return problem_from_dict(json.loads(Path(path).read_text()))


def desk2_document(**overrides) -> dict:
    """The two-mode desk-scale instance used throughout the test suite."""
    doc = {
        "modes": 2,
        "x0": 1.0,
        "i0": 1,
        "costs": [[0.0, 0.1], [0.1, 0.0]],
        "horizon": {"t_cap": 1.0, "n_steps": 10, "lambda": 0.0},
        "coefficients": {
            "b": ["0.2", "-0.2"],
            "sigma": ["0.25"],
            "f": None,
            "l": ["x", "-x"],
            "g": "x",
        },
        "hypothesis": {"mu1": 0.0, "mu2": 0.0, "mu3": 0.0, "k2": 1.0, "u_max": 1.0,
                       "epsilon": 0.5, "rho": 0.5, "strict_costs": True,
                       "sigma_min": 0.25, "b_bound": 0.2},
        "application_mode": SWITCHING,
    }
    doc.update(overrides)
    return doc


def desk2(**overrides) -> ProblemSpec:
    return problem_from_dict(desk2_document(**overrides))


def simple_problem(d: int = 1, *, b: Sequence[str] | str = "0", sigma: Sequence[str] | str = "0",
                   f: Sequence[str] | str | None = "0", l=None, g: str = "x", x0: float = 1.0,
                   C=None, t_cap: float = 1.0, n_steps: int = 10, i0: int = 1,
                   mode: str = GENERAL, exit_lo=None, exit_hi=None, hypothesis=None) -> ProblemSpec:
    """Build a small problem from keyword arguments (mainly for tests and examples)."""
    doc = {
        "modes": d, "x0": x0, "i0": i0,
        "costs": np.zeros((d, d)).tolist() if C is None else np.asarray(C, float).tolist(),
        "horizon": {"t_cap": t_cap, "n_steps": n_steps, "exit_lo": exit_lo, "exit_hi": exit_hi, "lambda": 0.0},
        "coefficients": {"b": b, "sigma": sigma, "f": f, "l": l, "g": g},
        "hypothesis": hypothesis or {"sigma_min": 1.0, "b_bound": 1.0},
        "application_mode": mode,
    }
    return problem_from_dict(doc)
