"""Command line entry point: ``python -m flestlib <command>``.

Exit codes are 0 on success, 1 for usage or configuration errors, 2 for any other failure and 3 when the gradient
check fails.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from logging import getLogger
from typing import Sequence

import numpy as np

from . import errors
from .api import FLESTExperiment
from .config import ExperimentConfig, load_config
from .enums import Split, TrainingMode
from .evaluation import format_table
from .model import GradSet


__all__ = ("main",)


logger = getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2
EXIT_GRADCHECK = 3


class _UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _config_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help="Config file of flat YAML or key = value lines, flags take precedence.")
    parent.add_argument(
        "--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="Logging verbosity."
    )

    fields = parent.add_argument_group("experiment config")
    for name in ExperimentConfig.field_names():
        flag = "--" + name.replace("_", "-")
        if name == "mode":
            fields.add_argument(flag, dest=name, choices=[mode.value for mode in TrainingMode])
        else:
            fields.add_argument(flag, dest=name, metavar=name.upper())
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_flags()
    parser = _ArgumentParser(prog="flestlib", description="Federated KG completion with shared latent dictionaries.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    commands.add_parser("partition", parents=[parent], help="Write per-client partition manifests.")
    commands.add_parser("train", parents=[parent], help="Train and write metrics and checkpoints.")

    eval_parser = commands.add_parser("eval", parents=[parent], help="Evaluate a checkpoint.")
    eval_parser.add_argument("--checkpoint", help="Defaults to final.ckpt in the output directory.")
    eval_parser.add_argument("--split", default=Split.test.value, choices=[split.value for split in Split])
    eval_parser.add_argument("--raw", action="store_true", help="Rank without filtering other known answers.")

    gradcheck_parser = commands.add_parser("gradcheck", parents=[parent], help="Finite-difference gradient check.")
    gradcheck_parser.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)

    compare_parser = commands.add_parser("compare", parents=[parent], help="Federated against local-only training.")
    compare_parser.add_argument("--client-counts", type=int, nargs="+", default=[1, 3, 5])
    compare_parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return parser


def _corrupt(grads: GradSet) -> GradSet:
    grads.w1 = grads.w1 + 1e-2 * np.ones_like(grads.w1)
    return grads


async def _run(args: argparse.Namespace, config: ExperimentConfig) -> int:
    config.log_fields()
    experiment = FLESTExperiment(config)

    if args.command == "partition":
        for path in await experiment.partition():
            print(path)
    elif args.command == "train":
        run = await experiment.train()
        print(f"rounds: {run.server.round}")
        print(f"best validation MRR: {run.best_mrr} (round {run.best_round})")
        print(f"metrics: {experiment.metrics_path}")
        print(f"checkpoint: {experiment.final_checkpoint_path}")
    elif args.command == "eval":
        reports = await experiment.evaluate(args.checkpoint, Split(args.split), filtered=not args.raw)
        print(format_table(reports), end="")
    elif args.command == "gradcheck":
        report = experiment.gradcheck(corrupt=_corrupt if args.corrupt_gradient else None)
        for name, error in report.max_rel_error.items():
            print(f"{name:<10} max relative error {error:.3e}")
        print(f"stationary max |grad| {report.stationary_max_grad:.3e}")
        print("PASSED" if report.passed else "FAILED")
        if not report.passed:
            return EXIT_GRADCHECK
    elif args.command == "compare":
        compare = await experiment.compare(args.client_counts, args.seeds)
        print(experiment.format_compare(compare), end="")

    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    overrides = {name: getattr(args, name) for name in ExperimentConfig.field_names()}
    try:
        config = load_config(args.config, overrides)
    except (errors.ConfigGeneric, FileNotFoundError) as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_USAGE

    try:
        return asyncio.run(_run(args, config))
    except errors.ConfigGeneric as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_USAGE
    except Exception as e:
        logger.error("%s failed.", args.command, exc_info=e)
        return EXIT_FAILURE
