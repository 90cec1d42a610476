"""Command-line entry point: ``twf {pretrain,run,analyze,report,validate}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config, shipped_config, validate_config
from .errors import ConfigError
from . import pipeline


def _config_path(value):
    path = Path(value)
    if path.exists() or path.suffix:
        return path
    # bare names refer to shipped configs
    return shipped_config(value)


def build_parser():
    parser = argparse.ArgumentParser(prog="twf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", required=True, help="YAML config path or shipped config name")
        p.add_argument("--output", help="artifact directory (overrides the config's output)")
        if seeds:
            p.add_argument("--seed", type=int, action="append",
                           help="run only this seed (repeatable); default: the config's seed list")

    p = sub.add_parser("pretrain", help="fill the pretraining checkpoint cache")
    common(p)
    p = sub.add_parser("run", help="pretrain, train, evaluate, analyse and report")
    common(p)
    p.add_argument("--resume", action="store_true", help="skip runs whose completion marker matches")
    p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    p = sub.add_parser("analyze", help="representation drift for runs listed under analysis.drift")
    common(p)
    p = sub.add_parser("report", help="rebuild the results table from completed runs")
    p.add_argument("--output", required=True, help="experiment artifact directory")
    p = sub.add_parser("validate", help="check a config and list diagnostics")
    p.add_argument("--config", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args):
    if args.verb == "report":
        out = pipeline.report_stage(args.output)
        print(f"report written to {out}")
        return 0
    path = _config_path(args.config)
    if args.verb == "validate":
        diags = validate_config(path)
        for d in diags:
            print(d)
        if not diags:
            print(f"{path}: ok")
        return 1 if diags else 0
    cfg = load_config(path, args.output)
    seeds = args.seed
    if args.verb == "pretrain":
        for eps, seed in pipeline.pretrain_stage(cfg, seeds):
            print(f"pretrained {cfg.pretrain['dataset']} eps={eps} seed={seed}")
        return 0
    if args.verb == "analyze":
        drift = pipeline.analyze_stage(cfg, seeds)
        print(f"drift computed for {len(drift)} run(s)")
        return 0
    if args.dry_run:
        print(cfg.plan())
        return 0
    try:
        out = pipeline.run_experiment(cfg, seeds, resume=args.resume)
    except Exception as exc:
        print(f"error: run failed ({exc}); see FAILED markers under {cfg.output}", file=sys.stderr)
        return 1
    print(f"report written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
