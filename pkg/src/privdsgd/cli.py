"""Command-line interface.

Subcommands: run-convex, run-nonconvex, privacy-bound, attack-eval,
dp-compare, validate-config. Exit codes: 0 success, 2 config error,
3 assumption violation (e.g. rho >= 1), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from .config import ExperimentConfig, load_config_mapping
from .errors import (AssumptionViolated, ConfigError, DisconnectedGraph,
                     InvalidAgentIndex, QuadratureFailure, SingularSystem)
from . import experiments

EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_NUMERICAL = 4


def _add_common(parser):
    parser.add_argument("--config", help="config or manifest path")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--reps", type=int, help="repetition override")
    parser.add_argument("--horizon", type=int, help="horizon override")


def _load(args) -> ExperimentConfig:
    values = load_config_mapping(args.config) if args.config else {}
    config = ExperimentConfig(values=values)
    return config.with_overrides(seed=args.seed, reps=args.reps,
                                 horizon=args.horizon)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privdsgd",
        description="Privacy-preserving decentralized SGD experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run-convex", "run-nonconvex", "privacy-bound", "dp-compare",
                 "validate-config"):
        p = sub.add_parser(name)
        _add_common(p)
    p = sub.add_parser("attack-eval")
    p.add_argument("--run", required=True,
                   help="directory of a logged run (manifest + message CSVs)")
    p.add_argument("--out", default="out", help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "attack-eval":
            rows = experiments.attack_eval(args.run, args.out)
            print(f"attack-eval: {len(rows)} rows -> {args.out}/attack_report.csv")
            return 0
        config = _load(args)
        if args.command == "validate-config":
            experiments.build_coupling(config)  # includes the rho < 1 check
            print("config ok")
            return 0
        if args.command == "run-convex":
            experiments.run_convex(config, args.out)
        elif args.command == "run-nonconvex":
            experiments.run_nonconvex(config, args.out)
        elif args.command == "privacy-bound":
            experiments.privacy_bound(config, args.out)
        elif args.command == "dp-compare":
            experiments.dp_comparison(config, args.out)
        print(f"{args.command}: outputs written to {args.out}")
        return 0
    except (ConfigError, DisconnectedGraph, InvalidAgentIndex, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionViolated as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except (SingularSystem, QuadratureFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
