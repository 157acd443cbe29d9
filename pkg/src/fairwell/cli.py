"""Command-line entry point: ``fairwell {synth,pretrain,evaluate,pareto}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .data import DataError
from .fairness import MetricPreconditionError
from .losses import METHODS, POOLING, ConstraintViolation
from .pipeline import RunLocked, cmd_evaluate, cmd_pareto, cmd_pretrain, cmd_synth
from .training import ConfigError, TrainingAborted

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairwell", description=__doc__)
    parser.add_argument("--quiet", action="store_true", help="suppress summaries on stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic JSONL dataset")
    p.add_argument("--config", help="SynthConfig JSON (defaults if omitted)")
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("pretrain", help="self-supervised pretraining into a run directory")
    p.add_argument("--config", help="TrainConfig JSON (defaults if omitted)")
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--pooling", choices=POOLING)

    p = sub.add_parser("evaluate", help="fit the probe and write predictions and fairness metrics")
    p.add_argument("run_dir")
    p.add_argument("--data", help="JSONL dataset (defaults to the one used for pretraining)")

    p = sub.add_parser("pareto", help="F1 vs AGG_F Pareto front over evaluated runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True, help="directory for pareto.csv and pareto.svg")

    for name in ("synth", "pretrain", "evaluate", "pareto"):
        sub.choices[name].add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    return parser


def run(args: argparse.Namespace) -> None:
    if args.command == "synth":
        cmd_synth(args.config, args.out, args.seed, args.quiet)
    elif args.command == "pretrain":
        cmd_pretrain(args.config, args.data, args.out, args.seed, args.method, args.pooling, args.quiet)
    elif args.command == "evaluate":
        cmd_evaluate(args.run_dir, args.data, args.quiet)
    else:
        cmd_pareto(args.run_dirs, args.out, args.quiet)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except TrainingAborted as exc:
        print(f"error: training aborted, last good checkpoint kept: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MetricPreconditionError, DataError, ConstraintViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, RunLocked, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
