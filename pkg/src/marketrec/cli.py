"""Command line front end over the pipeline stages.

Exit codes: 0 on success, 1 when arguments, config, or prerequisite
artifacts are invalid (usage or the offending key is named on stderr), 2
when a stage fails at runtime.
"""

from __future__ import annotations

import argparse
import sys

from marketrec import pipeline
from marketrec.config import DEFAULTS, read_config, validate_config


class UsageError(Exception):
    """Bad command line; argparse errors are rerouted here instead of exiting."""

    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, usage=self.format_usage())


def build_parser() -> _Parser:
    parser = _Parser(
        prog="marketrec",
        description="Generate a synthetic marketplace, train recommenders, and run feed experiments.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file (defaults apply when omitted)")
    common.add_argument("--out", metavar="DIR", default="out", help="artifact directory (default: %(default)s)")
    common.add_argument("--seed", type=int, metavar="N", help="override the config's root seed")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="simulate the market and write its warmup logs")
    sub.add_parser("train-als", parents=[common], help="factorize warmup behavior into user and item vectors")
    sub.add_parser("train-location", parents=[common], help="embed postcodes from behavior")
    sub.add_parser("train-text", parents=[common], help="train word vectors and the title classifier")
    sub.add_parser("train-image", parents=[common], help="distill image features toward text vectors")
    sub.add_parser("train-hybrid", parents=[common], help="fuse all item sources into one embedding")
    sub.add_parser("train-seq", parents=[common], help="train the session sequence recommender")

    fit = sub.add_parser("fit-bandit", parents=[common], help="fit a feed re-ranker on logged impressions")
    fit.add_argument("kind", choices=sorted(pipeline.BANDIT_FILES), help="which re-ranker to fit")

    ev = sub.add_parser("evaluate-hr", parents=[common], help="hit rate of every trained model on held-out days")
    ev.add_argument("--n", type=int, metavar="N", help="recommendation list length (default: eval.top_n)")

    ab = sub.add_parser("ab-sim", parents=[common], help="simulate an A/B test between two serving policies")
    ab.add_argument("--arm-a", choices=pipeline.ARM_CHOICES, default="row", help="control policy (default: %(default)s)")
    ab.add_argument("--arm-b", choices=pipeline.ARM_CHOICES, default="regression", help="treatment policy (default: %(default)s)")

    sub.add_parser("report", parents=[common], help="summarize the last ab-sim into a significance report")
    return parser


def _dispatch(args: argparse.Namespace, cfg, out: str) -> str:
    if args.command == "generate":
        return pipeline.stage_generate(cfg, out)
    if args.command == "train-als":
        return pipeline.stage_train_als(cfg, out)
    if args.command == "train-location":
        return pipeline.stage_train_location(cfg, out)
    if args.command == "train-text":
        return pipeline.stage_train_text(cfg, out)
    if args.command == "train-image":
        return pipeline.stage_train_image(cfg, out)
    if args.command == "train-hybrid":
        return pipeline.stage_train_hybrid(cfg, out)
    if args.command == "train-seq":
        return pipeline.stage_train_seq(cfg, out)
    if args.command == "fit-bandit":
        return pipeline.stage_fit_bandit(cfg, out, args.kind)
    if args.command == "evaluate-hr":
        return pipeline.stage_evaluate_hr(cfg, out, args.n)
    if args.command == "ab-sim":
        return pipeline.stage_ab_sim(cfg, out, args.arm_a, args.arm_b)
    if args.command == "report":
        return pipeline.stage_report(cfg, out)
    raise UsageError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc.usage or parser.format_usage(), file=sys.stderr, end="")
        print(f"marketrec: error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = read_config(args.config) if args.config else dict(DEFAULTS)
        if args.seed is not None:
            cfg["seed"] = args.seed
            validate_config(cfg)
        print(_dispatch(args, cfg, args.out))
        return 0
    except (UsageError, ValueError, FileNotFoundError) as exc:
        print(f"marketrec: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  - stage blew up mid-run
        print(f"marketrec: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
