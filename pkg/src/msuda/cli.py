"""Command-line entry point: one subcommand per pipeline stage.

    msuda <stage> [--config PATH] [--seed INT] [--work-dir PATH]
                  [--stage-overrides KEY=VAL ...]

Without --config the scaled-down desk configuration is used. Errors exit
nonzero with a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .config import (
    PipelineConfig, ConfigError, desk_config, load_config, parse_override,
    apply_overrides,
)
from .pipeline import (
    STAGES, STAGE_RUNNERS, PipelineError, MissingStageError, run_audit,
)
from .volume import VolumeError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msuda",
        description="Multi-site cross-modality adaptation pipeline")
    parser.add_argument("--verbose", "-v", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES + ("audit",):
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", default=None,
                       help="pipeline config JSON (default: desk preset)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the global seed")
        p.add_argument("--work-dir", default=None,
                       help="override paths.work_dir")
        p.add_argument("--stage-overrides", nargs="*", default=[],
                       metavar="KEY=VAL",
                       help="dotted-path config overrides, JSON values")
    return parser


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    overrides = [parse_override(o) for o in args.stage_overrides]
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(args.seed))
    if args.work_dir is not None:
        cfg = dataclasses.replace(
            cfg, paths=dataclasses.replace(cfg.paths, work_dir=args.work_dir))
    return cfg


def _emit_error(kind: str, message: str, stage=None) -> None:
    payload = {"error": kind, "message": message}
    if stage:
        payload["stage"] = stage
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        work = cfg.paths.work_dir
        if args.stage == "audit":
            result = run_audit(cfg, work)
            print(json.dumps(result, indent=1, sort_keys=True))
            return 0 if result["ok"] else 1
        manifest = STAGE_RUNNERS[args.stage](cfg, work)
        print(json.dumps({"stage": args.stage, "run_id": cfg.run_id(),
                          "manifest": str(manifest)}, sort_keys=True))
        return 0
    except ConfigError as exc:
        _emit_error("ConfigError", str(exc))
        return 2
    except MissingStageError as exc:
        _emit_error("MissingStageError", str(exc), exc.stage)
        return 3
    except PipelineError as exc:
        _emit_error("PipelineError", str(exc), exc.stage)
        return 4
    except (VolumeError, ValueError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 5
    except FileNotFoundError as exc:
        _emit_error("FileNotFoundError", str(exc))
        return 6


if __name__ == "__main__":
    sys.exit(main())
