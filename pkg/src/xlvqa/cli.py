"""Command-line entry point.

Subcommands map 1:1 onto pipeline stages (plus ``run`` for the whole chain):

    xlvqa gen-data --config cfg.json --out out/
    xlvqa pretrain | finetune | evaluate | ablate | fewshot | report | audit
    xlvqa run --config cfg.json --out out/ --seed 0 --seed 1

Each stage demands its upstream artifacts and is a cache hit when its config
section and upstream keys are unchanged. Exit code 0 on success; any failure
prints a one-line diagnostic to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError
from .runner import (
    ExperimentConfig,
    MissingArtifactError,
    Pipeline,
    load_experiment_config,
)

STAGE_COMMANDS = (
    "gen-data",
    "pretrain",
    "finetune",
    "evaluate",
    "ablate",
    "fewshot",
    "report",
    "audit",
    "run",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlvqa", description=__doc__.split("\n", 1)[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, action="append", default=None, help="repeatable seed override")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--stage-preset", choices=("m3p-like", "uc2-like"), default=None)
        p.add_argument("--protocol", action="append", default=None, help="repeatable protocol override")
    return parser


def _load_config(args) -> ExperimentConfig:
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.seed:
        config = dataclasses.replace(config, seeds=tuple(args.seed))
    if args.stage_preset:
        config = dataclasses.replace(config, stage_preset=args.stage_preset)
    if args.protocol:
        config = dataclasses.replace(config, protocols=tuple(args.protocol))
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        pipeline = Pipeline(_load_config(args), args.out)
        if args.command == "gen-data":
            path = pipeline.gen_data()
        elif args.command == "pretrain":
            path = pipeline.pretrain_stage()
        elif args.command == "finetune":
            paths = pipeline.finetune_stage()
            path = sorted(paths.values())[0].parent
        elif args.command == "evaluate":
            path = pipeline.evaluate_stage()[0].parent
        elif args.command == "ablate":
            out = pipeline.ablate_stage()
            path = out[0].parent if out else pipeline.out
        elif args.command == "fewshot":
            out = pipeline.fewshot_stage()
            path = out[0].parent if out else pipeline.out
        elif args.command == "report":
            path = pipeline.report_stage()
        elif args.command == "audit":
            problems = pipeline.audit()
            if problems:
                for p in problems:
                    print(f"AUDIT MISMATCH: {p}", file=sys.stderr)
                return 2
            print(json.dumps({"audit": "ok", "out": str(pipeline.out)}))
            return 0
        elif args.command == "run":
            path = pipeline.run_all()
        else:  # pragma: no cover - argparse enforces choices
            raise ValueError(args.command)
        print(json.dumps({"stage": args.command, "out": str(path)}))
        return 0
    except (ConfigError, MissingArtifactError, FileNotFoundError, ValueError) as exc:
        print(f"xlvqa {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
