"""Command-line front end.

Subcommands: preprocess, encode, evaluate, predict, report. A JSON config
file drives every run; individual flags override single fields. Exit
codes: 0 success, 1 validation error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import RunConfig, apply_env_overrides, load_config, save_config
from .errors import (ManifestEmpty, MissingSpecies, ModelMissing,
                     MycobowError)
from . import pipeline

VALIDATION_ERRORS = (ManifestEmpty, MissingSpecies, ModelMissing, ValueError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mycobow",
        description="Bag-of-words / Fisher Vector fungi scan classifier",
    )
    parser.add_argument("--config", help="JSON run config file")
    parser.add_argument("--manifest", help="dataset manifest path")
    parser.add_argument("--output-dir", help="output directory")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--workers", type=int,
                        help="worker processes (0 = all cores)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("preprocess", help="masks and gated patch index")
    enc = sub.add_parser("encode", help="vocabularies and encoded folds")
    enc.add_argument("--reuse", action="store_true",
                     help="reuse existing descriptor/vocabulary files")
    sub.add_parser("evaluate", help="outer 2-fold protocol and reports")
    pred = sub.add_parser("predict", help="classify one scan")
    pred.add_argument("scan", help="path to a scan image")
    sub.add_parser("report", help="mean-BoW, nearest patches, certainty")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.manifest:
        cfg.manifest = args.manifest
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    apply_env_overrides(cfg)
    if not cfg.manifest and args.command != "predict":
        raise ValueError("no manifest given (use --manifest or the config)")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "preprocess":
            index = pipeline.cmd_preprocess(cfg)
            print(f"patch index written to {index}")
        elif args.command == "encode":
            pipeline.cmd_encode(cfg, reuse=args.reuse)
            print("encodings written")
        elif args.command == "evaluate":
            report = pipeline.cmd_evaluate(cfg)
            mean, spread = report.total
            print(f"patch total accuracy: {mean:.1f} ± {spread:.1f}")
            if report.scan_total:
                smean, sspread = report.scan_total
                print(f"scan total accuracy: {smean:.1f} ± {sspread:.1f}")
        elif args.command == "predict":
            result = pipeline.cmd_predict(cfg, args.scan)
            print(json.dumps(result, indent=2, sort_keys=True))
        elif args.command == "report":
            pipeline.cmd_report(cfg)
            print("analysis artifacts written")
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MycobowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
