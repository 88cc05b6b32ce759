"""Command line entry point: ``odgen <stage> --config <path> [--seed S] [--override key=value]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .exceptions import (
    ClassMissing,
    ConfigError,
    InsufficientData,
    MissingArtifact,
    PoolMiss,
    StaleUpstream,
)
from .pipeline import STAGES, run_stage
from .shapes import make_shapes_corpus

EXIT_OK, EXIT_FAILURE, EXIT_PRECONDITION = 0, 1, 2
PRECONDITION_ERRORS = (MissingArtifact, StaleUpstream, ConfigError, PoolMiss, InsufficientData, ClassMissing)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odgen", description="Object-wise synthetic detection data pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("all",):
        p = sub.add_parser(name, help="run every stage in order" if name == "all" else f"run the {name} stage")
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. control.gamma=10 (repeatable)")
        p.add_argument("--force", action="store_true", help="re-run even if outputs are up to date")
    toy = sub.add_parser("make-toy-corpus", help="write the procedural shapes corpus in YOLO layout")
    toy.add_argument("--out", required=True)
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--n-train", type=int, default=200)
    toy.add_argument("--n-val", type=int, default=40)
    toy.add_argument("--n-test", type=int, default=40)
    toy.add_argument("--size", type=int, default=64)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "make-toy-corpus":
            root = make_shapes_corpus(args.out, args.n_train, args.n_val, args.n_test, args.size, args.seed)
            print(json.dumps({"corpus": str(root)}))
            return EXIT_OK
        config = load_config(args.config, args.override, args.seed)
        stages = STAGES if args.command == "all" else (args.command,)
        for stage in stages:
            result = run_stage(config, stage, force=args.force)
            print(json.dumps({"stage": stage, "status": result.status, "seconds": round(result.seconds, 2),
                              "outputs": {k: str(v) for k, v in result.outputs.items()}}))
    except PRECONDITION_ERRORS as exc:
        print(f"odgen: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        print(f"odgen: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
