"""Command-line entry point.

    ofair sweep --config experiment.yaml [--seed N] [--out DIR] [--threads N]

Verbs run the pipeline up to their stage: ingest, train, profile, rerank,
evaluate, sweep. Failures print one JSON line prefixed with ``error:`` on
stderr and exit non-zero (2 for config problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .config import ConfigError, validate_config
from .experiment import STAGES, ExperimentError, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ofair", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in STAGES:
        p = sub.add_parser(verb, help=f"run the pipeline up to '{verb}'")
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seed", type=int, help="override the config's root seed")
        p.add_argument("--out", metavar="DIR", help="output directory (default: config 'output')")
        p.add_argument("--threads", type=int, help="worker threads for the per-user sweep")
        p.add_argument("-v", "--verbose", action="store_true")
    check = sub.add_parser("validate", help="check a config and print it with defaults applied")
    check.add_argument("--config", required=True, metavar="PATH")
    return parser


def _fail(code: int, kind: str, errors) -> int:
    print("error: " + json.dumps({"kind": kind, "errors": errors}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = validate_config(args.config)
        if args.verb == "validate":
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return 0
        overrides = {}
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError([("--seed", "must be a non-negative integer")])
            overrides["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError([("--threads", "must be a positive integer")])
            overrides["threads"] = args.threads
        cfg = dataclasses.replace(cfg, **overrides)
        out = args.out or cfg.resolve(cfg.output)
        run_experiment(cfg, out, stage=args.verb)
    except ConfigError as exc:
        return _fail(2, "config", [{"field": p, "message": m} for p, m in exc.errors])
    except ExperimentError as exc:
        return _fail(1, "pipeline", [{"message": str(exc)}])
    print(json.dumps({"status": "ok", "verb": args.verb, "out": str(out)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
