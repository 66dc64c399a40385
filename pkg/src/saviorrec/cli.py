"""Command-line entry point: ``saviorrec <stage> [--config PATH] [--seed N] [--ablation TAG] [--force]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import SaviorError
from .pipeline import STAGES, format_report, load_report, run_all, run_stage
from .ranking.model import ABLATIONS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saviorrec", description="Synthetic cold-start CTR pipeline.")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", help="YAML config; omitted keys use the bundled defaults")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--ablation", choices=ABLATIONS, help="ranker variant for rank/eval/run-all")
    parser.add_argument("--workdir", help="override the artifact directory")
    parser.add_argument("--force", action="store_true", help="overwrite artifacts built from another config")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.stage
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.ablation, args.workdir)
        if stage == "run-all":
            report = run_all(cfg, args.force)
            print(format_report(report), end="")
            return 0
        result = run_stage(stage, cfg, args.force)
    except (SaviorError, OSError) as exc:
        print(f"saviorrec: error: [{getattr(exc, 'stage', stage)}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if "table" in result:
        print(result["table"], end="")
    elif stage == "eval":
        print(format_report(load_report(cfg)), end="")
    else:
        state = "up to date" if result.get("skipped") else "done"
        print(f"{stage}: {state} ({result['dir']})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
