"""Command line: ``python -m pamoe {train,compare-routing,ablate,report,selfcheck}``.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical abort
(or a failed self-check). ``PAMOE_OUTPUT_ROOT`` sets the output root unless
``--out`` is given.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .envs import ConfigError, UsageError
from .harness import ABLATION_AXES, ablate, compare_routing, report, run_experiment
from .training import NumericalAbort

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("pamoe")


def _seeds(text: str | None):
    if text is None:
        return None
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. policy.K=0; repeatable")
    p.add_argument("--seeds", help="comma-separated seeds (overrides training.seeds)")
    p.add_argument("--out", help="output root (overrides PAMOE_OUTPUT_ROOT and output_dir)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pamoe", description="Phase-aware mixture of LoRA experts")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate one config over its seeds")
    _common(p)
    p.add_argument("--name", help="run name (defaults to run_name in the config)")

    p = sub.add_parser("compare-routing", help="token vs trajectory vs phase routing")
    _common(p)

    p = sub.add_parser("ablate", help="sweep one axis holding the rest fixed")
    _common(p)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)

    p = sub.add_parser("report", help="aggregate completed runs")
    p.add_argument("runs", nargs="*", help="run directories")
    p.add_argument("--out", help="where to write the report tables")

    p = sub.add_parser("selfcheck", help="gradient and isolation battery")
    p.add_argument("--cases", type=int, default=100, help="random cases per op")
    return ap


def _dispatch(args) -> int:
    if args.command == "report":
        tables = report(args.runs, args.out)
        for arm, row in tables.items():
            print(f"{arm}: success {row['success_mean']:.3f} +/- {row['success_std']:.3f} "
                  f"over {row['n_seeds']} seed(s)")
        return EXIT_OK
    if args.command == "selfcheck":
        from .selfcheck import run_selfcheck
        results = run_selfcheck(args.cases)
        for r in results:
            print(f"{'PASS' if r.ok else 'FAIL'}  {r.name}: {r.detail}")
        return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERICAL

    cfg = load_config(args.config, args.overrides)
    seeds = _seeds(args.seeds)
    if args.command == "train":
        res = run_experiment(cfg, args.out, args.name, seeds)
    elif args.command == "compare-routing":
        res = compare_routing(cfg, args.out, seeds)
    else:
        res = ablate(cfg, args.axis, args.out, seeds)
    _print_summary(args.command, res)
    return EXIT_OK


def _print_summary(command: str, res: dict) -> None:
    if command == "train":
        res = {"run": res}
    for arm, per_seed in res.items():
        for seed, s in sorted(per_seed.items()):
            print(f"{arm} seed {seed}: success {s['success']:.3f} "
                  f"(simple {s['success_simple']:.3f}, complex {s['success_complex']:.3f}), "
                  f"switches/episode {s['step_switches']:.2f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
