"""Command line entry point: ``mri-instability <subcommand> [--config PATH] [--out DIR] ...``.

Subcommands run one pipeline stage each (``phantom``, ``train``,
``reconstruct``, ``attack``, ``transfer``, ``report``) or all of them in order
(``pipeline``).  Exit codes: 0 success, 2 config error, 3 missing upstream
artifact, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys

from ..errors import MriInstabilityError
from . import pipeline
from .config import load_config

STAGES = ("phantom", "train", "reconstruct", "attack", "transfer", "report", "pipeline")

log = logging.getLogger("mri_instability")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mri-instability",
                                     description="Desk-scale MRI reconstruction instability experiments.")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, help="top-level seed override")
    parser.add_argument("--jobs", type=int, default=1, help="worker threads for attack/transfer")
    parser.add_argument("--models", nargs="+", help="train: restrict to these models")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    try:
        cfg = load_config(args.config, overrides)
        ws = pipeline.Workspace(cfg)
        if args.stage == "pipeline":
            record = pipeline.end_to_end_pipeline(cfg, jobs=args.jobs)
            paths = record.artifacts
        else:
            ws.write_config()
            paths = {
                "phantom": lambda: pipeline.stage_phantom(ws),
                "train": lambda: pipeline.stage_train(ws, args.models),
                "reconstruct": lambda: pipeline.stage_reconstruct(ws),
                "attack": lambda: pipeline.stage_attack(ws, args.jobs),
                "transfer": lambda: pipeline.stage_transfer(ws, args.jobs),
                "report": lambda: pipeline.stage_report(ws),
            }[args.stage]()
    except MriInstabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    for p in paths:
        print(p)
    return 0


def main():
    sys.exit(run())
