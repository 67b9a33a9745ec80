"""Experiment configuration and the validate / solve / oracle / compare / policy runs.

Each ``run_*`` function takes an :class:`ExperimentConfig`, writes its
artifacts under ``config.out`` and returns a small summary dict. The CLI is a
thin wrapper that maps exceptions to exit codes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .model import (ProblemSpec, SpecError, ValidationReport, Violation, check_problem,
                    problem_from_dict)
from .exprdsl import ExprError
from .oracle import MAX_ENUM_MODES, MAX_ENUM_STEPS, OracleRefusal, dp_solve, enumerate_strategies
from .paths import PathBundle, TimeGrid, coarsen_increments, dump_bundle, simulate_forward
from .penalized import STABILITY_BOUND, cauchy_gap, penalty_violation_norm, solve_penalized
from .reflected import domain_violation, skorokhod_residual, solve_reflected
from .switching import (CONTROLLED, GIRSANOV, EstimatorRefused, FieldPolicy, estimate_profit,
                        policy_improvement_check, standard_perturbations, strategy_lines)


class ConfigError(ValueError):
    pass


class ValidationFailed(RuntimeError):
    def __init__(self, report: ValidationReport):
        super().__init__("; ".join(report.lines()))
        self.report = report


@dataclass
class ExperimentConfig:
    problem_doc: dict
    seed: int = 1
    n_paths: int = 10_000
    ladder: tuple[int, ...] = (10, 20, 40)
    degree: int = 2
    estimator: str = CONTROLLED
    oracle_n: Optional[int] = None
    out: Path = Path("out")
    eval_seed: Optional[int] = None
    dump_paths: bool = False
    n_random_perturbations: int = 5
    problem: ProblemSpec = field(init=False, repr=False)

    def __post_init__(self):
        try:
            self.problem = problem_from_dict(self.problem_doc)
        except ExprError as exc:
            # expression failures are reported by validation, not as config errors
            self.problem = None
            self.parse_error = exc
        else:
            self.parse_error = None
        self.ladder = tuple(int(n) for n in self.ladder)
        self.out = Path(self.out)
        if not self.ladder or any(n <= 0 for n in self.ladder):
            raise ConfigError("penalty ladder must be a non-empty list of positive integers")
        if any(b <= a for a, b in zip(self.ladder, self.ladder[1:])):
            raise ConfigError(f"penalty ladder must be strictly increasing, got {list(self.ladder)}")
        if self.estimator not in (CONTROLLED, GIRSANOV):
            raise ConfigError(f"estimator must be {CONTROLLED!r} or {GIRSANOV!r}")
        if self.n_paths < 2:
            raise ConfigError("n_paths must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if self.degree < 0:
            raise ConfigError("degree must be >= 0")

    @property
    def fresh_seed(self) -> int:
        """Seed for policy evaluation; differs from the solve seed to avoid foresight."""
        return self.eval_seed if self.eval_seed is not None else (self.seed + 1) % 2**64

    def ladder_grids(self) -> list[tuple[int, TimeGrid]]:
        """Pair every penalty n with the coarsest refinement N_base * 2^j satisfying n dt <= 0.5."""
        spec = self.spec
        base, T = spec.horizon.n_steps, spec.horizon.t_cap
        out = []
        for n in self.ladder:
            N = base
            while n * T / N > STABILITY_BOUND:
                N *= 2
            grid = TimeGrid(T, N)
            if n * grid.dt > STABILITY_BOUND:
                raise ConfigError(f"ladder entry {n} breaks n dt <= {STABILITY_BOUND}")
            out.append((n, grid))
        return out

    @property
    def spec(self) -> ProblemSpec:
        if self.problem is None:
            raise ValidationFailed(ValidationReport([Violation("(H1)", f"expression error: {self.parse_error}")]))
        return self.problem

    def canonical(self) -> dict:
        return {
            "problem": self.problem_doc, "seed": self.seed, "n_paths": self.n_paths,
            "ladder": list(self.ladder), "degree": self.degree, "estimator": self.estimator,
            "oracle_n": self.oracle_n, "eval_seed": self.fresh_seed,
            "n_random_perturbations": self.n_random_perturbations,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_PARAM_KEYS = {"seed", "n_paths", "ladder", "degree", "estimator", "oracle_n", "out", "eval_seed",
               "n_random_perturbations"}


def load_config(path, **overrides) -> ExperimentConfig:
    """Read an experiment config, or a bare problem document, from JSON.

    An experiment config has a ``problem`` key holding either an inline
    document or a path relative to the config file.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "problem" in doc:
        prob = doc["problem"]
        if isinstance(prob, str):
            ppath = (path.parent / prob)
            try:
                prob = json.loads(ppath.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read problem {ppath}: {exc}") from None
        params = {k: v for k, v in doc.items() if k in _PARAM_KEYS}
        unknown = set(doc) - _PARAM_KEYS - {"problem"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
    else:
        prob, params = doc, {}
    params.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(prob, **params)
    except (TypeError, SpecError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- output helpers

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def write_manifest(cfg: ExperimentConfig, command: str, files: list[Path], extra: Optional[dict] = None) -> Path:
    """Manifest with config hash, seed, versions and output digests; no timestamps."""
    man = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "config": cfg.canonical(),
        "seed": cfg.seed,
        "versions": {"obsw": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in files},
    }
    if extra:
        man.update(extra)
    path = cfg.out / f"manifest_{command}.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- runs

def run_validate(cfg: ExperimentConfig) -> ValidationReport:
    if cfg.problem is None:
        return ValidationReport([Violation("(H1)", f"expression error: {cfg.parse_error}")])
    report = check_problem(cfg.problem)
    try:
        cfg.ladder_grids()
    except ConfigError as exc:
        report.violations.append(Violation("stability", str(exc)))
    return report


def _require_valid(cfg: ExperimentConfig) -> ProblemSpec:
    report = run_validate(cfg)
    if not report.valid:
        raise ValidationFailed(report)
    for w in report.warnings:
        print(f"warning: {w.hypothesis}: {w.message}", file=sys.stderr)
    return cfg.problem


def _bundle_on(spec: ProblemSpec, fine: PathBundle, grid: TimeGrid) -> PathBundle:
    if grid == fine.grid:
        return fine
    factor = fine.grid.n_steps // grid.n_steps
    dW = coarsen_increments(fine.dW, factor)
    return simulate_forward(spec, grid, fine.n_paths, fine.seed, dW=dW)


@dataclass
class SolveResult:
    reflected: object
    ladder: list  # (n, grid, penalized solution, reflected solution on the same grid)
    fine: PathBundle
    base: PathBundle


def solve_all(cfg: ExperimentConfig) -> SolveResult:
    """Reflected solve on the problem grid and the penalty ladder, all on one Brownian sample."""
    spec = cfg.spec
    base_grid = TimeGrid.for_spec(spec)
    pairs = cfg.ladder_grids()
    fine_grid = max([base_grid] + [g for _, g in pairs], key=lambda g: g.n_steps)
    for _, g in pairs:
        if fine_grid.n_steps % g.n_steps:
            raise ConfigError("ladder grids do not nest")
    fine = simulate_forward(spec, fine_grid, cfg.n_paths, cfg.seed)
    base = _bundle_on(spec, fine, base_grid)
    refl = solve_reflected(base, spec, base_grid, cfg.degree)
    ladder = []
    for n, g in pairs:
        b = _bundle_on(spec, fine, g)
        ladder.append((n, g, solve_penalized(b, spec, g, n, cfg.degree),
                       refl if g == base_grid else solve_reflected(b, spec, g, cfg.degree)))
    return SolveResult(refl, ladder, fine, base)


LADDER_COLUMNS = ["n", "n_steps", "mode", "Y0", "Y0_se", "violation_sup", "violation_integral", "cauchy_gap",
                  "domain_violation", "skorokhod_residual", "reflected_Y0", "reflected_gap"]
VALUE_COLUMNS = ["scheme", "n_steps", "mode", "Y0", "Y0_se"]
DIAGNOSTIC_COLUMNS = ["scheme", "mode", "k", "t", "domain_violation", "skorokhod_residual"]


def run_solve(cfg: ExperimentConfig) -> dict:
    spec = _require_valid(cfg)
    res = solve_all(cfg)
    lam = spec.horizon.lam
    out = cfg.out
    files = []
    refl = res.reflected
    values = [("reflected", refl.grid.n_steps, i + 1, refl.y0[i], refl.y0_se[i]) for i in range(spec.d)]
    n_max, _, pen_max, _ = res.ladder[-1]
    values += [(f"penalized(n={n_max})", pen_max.grid.n_steps, i + 1, pen_max.y0[i], pen_max.y0_se[i])
               for i in range(spec.d)]
    files.append(write_csv(out / "values.csv", VALUE_COLUMNS, values))

    rows = []
    for j, (n, g, pen, ref) in enumerate(res.ladder):
        viol = penalty_violation_norm(pen, lam)
        gap = cauchy_gap(pen, res.ladder[j + 1][2], lam, per_mode=True) if j + 1 < len(res.ladder) else None
        dom = domain_violation(pen, per_mode=True)
        sk = skorokhod_residual(pen, per_mode=True)
        rgap = cauchy_gap(pen, ref, lam, per_mode=True)
        for i in range(spec.d):
            rows.append((n, g.n_steps, i + 1, pen.y0[i], pen.y0_se[i], viol["sup_by_mode"][i],
                         viol["integral_by_mode"][i], None if gap is None else gap[i], dom[i], sk[i],
                         ref.y0[i], rgap[i]))
    files.append(write_csv(out / "ladder.csv", LADDER_COLUMNS, rows))

    diag = []
    for name, sol in [("reflected", refl)] + [(f"penalized(n={n})", pen) for n, _, pen, _ in res.ladder]:
        dv = domain_violation(sol, per_step=True)
        sk = skorokhod_residual(sol, per_step=True)
        for i in range(spec.d):
            for k in range(sol.grid.n_steps + 1):
                diag.append((name, i + 1, k, sol.grid.times[k], dv[i, k], sk[i, k]))
    files.append(write_csv(out / "diagnostics.csv", DIAGNOSTIC_COLUMNS, diag))

    extra = {
        "grids": {"reflected": refl.grid.n_steps, "ladder": {str(n): g.n_steps for n, g, _, _ in res.ladder},
                  "simulated": res.fine.grid.n_steps},
        "basis": {"family": "monomial", "degree": cfg.degree},
        "reduced_fits": len(refl.reduced_fits),
    }
    if cfg.dump_paths:
        dump_bundle(res.fine, out / "paths.bin")
        extra["paths_dump"] = "paths.bin"
    files.append(write_manifest(cfg, "solve", files, extra))
    return {"files": files, "reflected_y0": refl.y0.tolist(), "penalized_y0": pen_max.y0.tolist()}


ORACLE_COLUMNS = ["N", "mode", "node", "value"]


def _oracle_n(cfg: ExperimentConfig) -> int:
    return int(cfg.oracle_n or cfg.spec.horizon.n_steps)


def run_oracle(cfg: ExperimentConfig) -> dict:
    spec = _require_valid(cfg)
    N = _oracle_n(cfg)
    lat = dp_solve(spec, N)
    files = [write_csv(cfg.out / "oracle.csv", ORACLE_COLUMNS, lat.rows())]
    summary = [("lattice-dp", N, lat.value, "")]
    result = {"dp": lat.value, "enumeration": None}
    if N <= MAX_ENUM_STEPS and spec.d <= MAX_ENUM_MODES:
        try:
            en = enumerate_strategies(spec, N)
            summary.append(("enumeration", N, en.value, f"nodes={en.nodes_searched}"))
            result["enumeration"] = en.value
        except OracleRefusal as exc:
            summary.append(("enumeration", N, None, f"refused: {exc}"))
    files.append(write_csv(cfg.out / "oracle_summary.csv", ["method", "N", "value", "detail"], summary))
    files.append(write_manifest(cfg, "oracle", files))
    result["files"] = files
    return result


COMPARE_COLUMNS = ["quantity", "mode", "value", "se", "abs_diff", "rel_diff"]


def run_compare(cfg: ExperimentConfig) -> dict:
    spec = _require_valid(cfg)
    N = _oracle_n(cfg)
    lat = dp_solve(spec, N)  # refusals propagate before any Monte Carlo work
    en = None
    if N <= MAX_ENUM_STEPS and spec.d <= MAX_ENUM_MODES:
        en = enumerate_strategies(spec, N)
    res = solve_all(cfg)
    i0 = spec.i0
    ref = lat.value
    table = [
        ("reflected_mc", res.reflected.y0[i0], res.reflected.y0_se[i0]),
        (f"penalized_mc(n={res.ladder[-1][0]})", res.ladder[-1][2].y0[i0], res.ladder[-1][2].y0_se[i0]),
        (f"lattice_dp(N={N})", ref, 0.0),
    ]
    if en is not None:
        table.append((f"enumeration(N={N})", en.value, 0.0))
    if spec.switching:
        policy = FieldPolicy(res.reflected, spec)
        for est in (CONTROLLED, GIRSANOV):
            try:
                pe = estimate_profit(spec, policy, res.reflected.grid, cfg.n_paths, cfg.fresh_seed, est)
                table.append((f"J_star[{est}]", pe.mean, pe.se))
            except EstimatorRefused as exc:
                print(f"note: {est} estimator refused: {exc}", file=sys.stderr)
    rows = []
    for name, v, se in table:
        diff = abs(v - ref)
        rel = diff / abs(ref) if ref != 0 else (0.0 if diff == 0 else float("inf"))
        rows.append((name, i0 + 1, v, se, diff, rel))
    files = [write_csv(cfg.out / "compare.csv", COMPARE_COLUMNS, rows)]
    files.append(write_manifest(cfg, "compare", files, {"oracle_n": N}))
    return {"files": files, "rows": rows}


def run_policy(cfg: ExperimentConfig) -> dict:
    """Extract the feedback rule, evaluate it on fresh paths and check it against perturbations."""
    spec = _require_valid(cfg)
    if not spec.switching:
        raise SpecError("policy evaluation needs application_mode 'switching'")
    grid = TimeGrid.for_spec(spec)
    bundle = simulate_forward(spec, grid, cfg.n_paths, cfg.seed)
    sol = solve_reflected(bundle, spec, grid, cfg.degree)
    policy = FieldPolicy(sol, spec)
    seed = cfg.fresh_seed
    pe = estimate_profit(spec, policy, grid, cfg.n_paths, seed, cfg.estimator)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    spath = out / "strategy.jsonl"
    with spath.open("w") as fh:
        for line in strategy_lines(pe.strategy, pe.payoff):
            fh.write(line + "\n")
    counts = pe.strategy.switch_count
    hist = np.bincount(counts, minlength=1)
    summary = [("estimator", pe.estimator), ("n_paths", cfg.n_paths), ("seed", seed), ("J", pe.mean),
               ("J_se", pe.se), ("Y0", sol.y0[spec.i0]), ("Y0_se", sol.y0_se[spec.i0]),
               ("mean_switches", float(counts.mean()))]
    if pe.weight is not None:
        summary += [("weight_mean", pe.weight_mean), ("weight_se", pe.weight_se)]
    summary += [(f"paths_with_{s}_switches", int(c)) for s, c in enumerate(hist)]
    files = [spath, write_csv(out / "policy_summary.csv", ["metric", "value"], summary)]
    perts = standard_perturbations(policy, spec.d, seed, cfg.n_random_perturbations)
    rep = policy_improvement_check(spec, sol, grid, cfg.n_paths, seed, perts, cfg.estimator)
    files.append(write_csv(out / "improvement.csv",
                           ["strategy", "J", "se", "J_star", "se_star", "margin", "combined_se", "mean_switches", "ok"],
                           [(r["name"], r["J"], r["se"], r["J_star"], r["se_star"], r["margin"], r["combined_se"],
                             r["mean_switches"], int(r["ok"])) for r in rep.rows]))
    files.append(write_manifest(cfg, "policy", files))
    return {"files": files, "estimate": pe, "improvement": rep, "y0": sol.y0[spec.i0], "y0_se": sol.y0_se[spec.i0]}


__all__ = [
    "ConfigError", "ValidationFailed", "ExperimentConfig", "load_config", "run_validate", "run_solve",
    "run_oracle", "run_compare", "run_policy", "solve_all", "write_csv",
]
