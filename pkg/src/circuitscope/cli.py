"""Command-line entry point: ``circuitscope <stage> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from . import io
from .patchengine import CalibrationError
from .pipeline import DependencyError, OverwriteError, Stage, load_config, run
from .toyvlm import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_CALIBRATION = 4

COMMANDS = [s.value for s in Stage] + ["all"]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file (default: reference config)")
    common.add_argument("--out", metavar="DIR", help="output directory (fallback: $CIRCUITSCOPE_OUT)")
    common.add_argument("--seed", type=int, metavar="N", help="override the master seed")
    common.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes (output is identical)")
    common.add_argument("--stage-only", action="store_true",
                        help="run only this stage; fail if upstream artifacts are missing")
    common.add_argument("-v", "--verbose", action="store_true", help="log stage timings and seeds")
    parser = argparse.ArgumentParser(prog="circuitscope", description="Dual-pathway circuit analysis on toy VLMs.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common], help="run every stage" if cmd == "all" else f"run the {cmd} stage")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
            config.validate()
        out = args.out or config.output or os.environ.get("CIRCUITSCOPE_OUT")
        if not out:
            raise ConfigError("no output directory: pass --out, set 'output' in the config, or set CIRCUITSCOPE_OUT")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        stage = None if args.command == "all" else Stage(args.command)
        times = run(config, out, stage, force=args.force, jobs=args.jobs, stage_only=args.stage_only)
    except (ConfigError, OverwriteError) as exc:
        print(f"circuitscope: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, io.FormatError) as exc:
        print(f"circuitscope: dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except CalibrationError as exc:
        print(f"circuitscope: calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    for s, dt in times.items():
        print(f"{s.value:<10} {dt:8.2f} s")
    print(f"artifacts in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
