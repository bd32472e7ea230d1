"""Command line entry point: ``cfml <experiment-id> --config <path> --out <dir>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import EXPERIMENTS, ConfigError, validate_config
from .experiments import ExperimentError, run_experiment


def _seed_list(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfml", description="Run a collaborative-filtering experiment.")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seeds", type=_seed_list, default=None, help="comma-separated seeds, e.g. 0,1,2")
    parser.add_argument("--smoke", action="store_true", help="tiny sizes for a quick end-to-end check")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(stage, exc, code):
    report = {"status": "error", "stage": stage, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        report["field"] = exc.path
    print(json.dumps(report, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = validate_config(args.config, smoke=args.smoke, seeds=args.seeds)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    if cfg.experiment != args.experiment:
        err = ConfigError("experiment", f"config is for {cfg.experiment!r} but {args.experiment!r} was requested")
        return _fail("config", err, 2)
    try:
        out = run_experiment(cfg, args.out)
    except ExperimentError as exc:
        return _fail(exc.stage, exc, 1)
    except Exception as exc:  # any stage failure becomes a structured report
        return _fail("run", exc, 1)
    print(json.dumps({"status": "ok", "out": str(out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
