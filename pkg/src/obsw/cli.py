"""Command line entry point: ``obsw {validate,solve,oracle,compare,policy}``.

Exit codes: 0 success, 2 unreadable or malformed config, 3 validation
failure, 4 solver error, 5 oracle refusal.
"""
from __future__ import annotations

import argparse
import sys

from .exprdsl import ExprError
from .experiment import (ConfigError, ValidationFailed, load_config, run_compare, run_oracle, run_policy,
                         run_solve, run_validate)
from .model import ParameterError, SpecError
from .oracle import OracleRefusal
from .paths import SimulationError
from .reflected import ReflectionError
from .switching import EstimatorRefused

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_SOLVER = 4
EXIT_ORACLE = 5


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def _u32(text: str) -> int:
    v = int(text)
    if not 2 <= v < 2**32:
        raise argparse.ArgumentTypeError("paths must be in [2, 2^32)")
    return v


def _ladder(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("ladder is a comma separated list of integers") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config or bare problem document (JSON)")
    common.add_argument("--seed", type=_u64, help="solve seed (unsigned 64-bit)")
    common.add_argument("--paths", type=_u32, dest="n_paths", help="number of Monte Carlo paths")
    common.add_argument("--out", help="output directory")
    common.add_argument("--degree", type=int, help="polynomial basis degree")
    common.add_argument("--ladder", type=_ladder, help="penalty ladder, e.g. 10,20,40")
    common.add_argument("--oracle-n", type=int, dest="oracle_n", help="lattice steps for the oracle")
    common.add_argument("--estimator", choices=["controlled-drift", "girsanov"])
    common.add_argument("--eval-seed", type=_u64, dest="eval_seed", help="seed for fresh evaluation paths")
    p = argparse.ArgumentParser(prog="obsw", description="Reflected FBSDE and optimal switching solver.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check hypotheses and expressions")
    s = sub.add_parser("solve", parents=[common], help="reflected solve plus penalty ladder")
    s.add_argument("--dump-paths", action="store_true", help="write the simulated paths to paths.bin")
    sub.add_parser("oracle", parents=[common], help="lattice dynamic programming and enumeration")
    sub.add_parser("compare", parents=[common], help="Monte Carlo against the lattice oracle")
    sub.add_parser("policy", parents=[common], help="extract, evaluate and stress the switching strategy")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in
                 ("seed", "n_paths", "out", "degree", "ladder", "oracle_n", "estimator", "eval_seed")}
    if getattr(args, "dump_paths", False):
        overrides["dump_paths"] = True
    try:
        cfg = load_config(args.config, **overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "validate":
            report = run_validate(cfg)
            for line in report.lines():
                print(line)
            if not report.valid:
                return EXIT_VALIDATION
            print("valid")
        elif args.command == "solve":
            res = run_solve(cfg)
            print("reflected Y0:", " ".join(f"{v:.6f}" for v in res["reflected_y0"]))
            print("penalized Y0:", " ".join(f"{v:.6f}" for v in res["penalized_y0"]))
        elif args.command == "oracle":
            res = run_oracle(cfg)
            print(f"lattice dp: {res['dp']:.12g}")
            if res["enumeration"] is not None:
                print(f"enumeration: {res['enumeration']:.12g}")
        elif args.command == "compare":
            res = run_compare(cfg)
            for name, mode, v, se, diff, rel in res["rows"]:
                print(f"{name:32s} {v:.6f}  se {se:.2e}  rel {rel:.2e}")
        elif args.command == "policy":
            res = run_policy(cfg)
            pe = res["estimate"]
            print(f"J = {pe.mean:.6f} (se {pe.se:.2e}) vs Y0 = {res['y0']:.6f}")
            for r in res["improvement"].rows:
                print(f"{r['name']:24s} J {r['J']:.6f}  {'ok' if r['ok'] else 'VIOLATION'}")
            if not res["improvement"].passed:
                return EXIT_SOLVER
    except ValidationFailed as exc:
        for line in exc.report.lines():
            print(line, file=sys.stderr)
        return EXIT_VALIDATION
    except OracleRefusal as exc:
        print(f"oracle refused: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, ReflectionError, ParameterError, EstimatorRefused, ExprError, SpecError) as exc:
        print(f"solver error [{type(exc).__module__}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
