"""Command-line entry point: training runs and self-check suites."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .harness import ExperimentConfig, run_experiment
from .schedules import validate_region


def _report(results: list[tuple[str, bool, str]]) -> int:
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_run(args) -> int:
    config = ExperimentConfig.load(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = args.out or config.output_dir
    summary = run_experiment(config, out, seeds, workers=args.workers)
    print(json.dumps(summary["mean"], indent=2))
    print(f"metrics written to {Path(out).resolve()}")
    return 0


def cmd_grad_check(args) -> int:
    return _report(checks.grad_check(n_instances=args.instances, seed=args.seed))


def cmd_oracle_check(args) -> int:
    return _report(checks.oracle_check(n_instances=args.instances, seed=args.seed))


def cmd_validate_config(args) -> int:
    try:
        config = ExperimentConfig.load(args.config)
    except (ValueError, TypeError, KeyError) as exc:
        print(f"FAIL  config could not be parsed: {exc}")
        return 1
    hard = config.hard_violations()
    for msg in hard:
        print(f"FAIL  {msg}")
    logging.getLogger("sldac.schedules").setLevel(logging.ERROR)   # reported below instead
    for label in validate_region(config.schedules.kappas):
        print(f"WARN  step-size exponents {config.schedules.kappas} violate {label}")
    if not hard:
        print("config OK")
    return 1 if hard else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sldac", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train with a JSON experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", help="comma-separated seeds overriding the config")
    r.add_argument("--out", help="output directory (default: config output_dir)")
    r.add_argument("--workers", type=int, default=1, help="parallel seed processes")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("grad-check", help="finite-difference checks of network and policy gradients")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)

    o = sub.add_parser("oracle-check", help="subproblem solvers vs grid search, chain Bellman residuals")
    o.add_argument("--instances", type=int, default=20)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle_check)

    v = sub.add_parser("validate-config", help="check config invariants and the step-size region")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
