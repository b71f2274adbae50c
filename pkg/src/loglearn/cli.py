"""Command line entry point: ``loglearn <command> --config PATH --seed N --out DIR``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .autodiff import NumericalError
from .data import DataError
from .runner import COMMANDS, ConfigError, RunAborted, load_config, run_command
from .training import TrainingAborted

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

HELP = {
    "pretrain": "train a self-supervised model on the source wells",
    "transfer": "fine-tune or regularize-transfer an anchor onto the target wells",
    "reverse": "transfer, then re-score on the held-out source wells",
    "sweep": "run the Cartesian product of the sweep axes",
    "export": "write interval embeddings from a checkpoint",
    "eval": "score a checkpoint on a well selection",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loglearn", description="Self-supervised well-log representation learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="INI or JSON experiment config")
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--out", default=None, help="output directory (default $LOGLEARN_OUT or ./runs)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out or os.environ.get("LOGLEARN_OUT") or "runs")
    try:
        cfg = load_config(args.config)
        report = run_command(args.command, cfg, args.seed, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RunAborted, TrainingAborted, NumericalError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{report.run_id}: {report.status}; reports in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
