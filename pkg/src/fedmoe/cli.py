"""Command-line entry point: ``fedmoe <subcommand> --out DIR [--config PATH] [--seed N] [--threads N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .orchestrator import (STAGE_FUNCS, PipelineConfig, StageError, ablate, build_manifest, report, run_pipeline,
                           run_stage, smoke_config)


def _config(args) -> PipelineConfig:
    out_cfg = Path(args.out) / "config.json"
    if args.config:
        cfg = PipelineConfig.load(args.config)
    elif args.smoke:
        cfg = smoke_config()
    elif out_cfg.exists():
        cfg = PipelineConfig.load(out_cfg)
    else:
        cfg = PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGE_FUNCS) + ["ablate", "run-all", "report"]:
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config", help="canonical JSON config (a manifest.json is accepted too)")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--smoke", action="store_true", help="use the small N=4, K=2 configuration")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    try:
        if args.command == "report":
            print(report(out))
            return 0
        cfg = _config(args)
        if args.command == "run-all":
            run_pipeline(cfg, out, args.threads)
            print(report(out))
        elif args.command == "ablate":
            result = ablate(cfg, out, args.threads)
            print(json.dumps(result, indent=1, sort_keys=True))
        else:
            run_stage(args.command, cfg, out, args.threads)
            if args.command == "evaluate":
                (out / "manifest.json").write_text(json.dumps(build_manifest(cfg, out), indent=1, sort_keys=True) + "\n")
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
