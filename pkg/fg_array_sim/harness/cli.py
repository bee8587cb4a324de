#!/usr/bin/env python3
"""
fg-array-sim command-line front end.

Usage:
    # Four-step sequential tuning of a small array from a bundled template
    fg-array-sim tune --config tune_sequence --seed 1

    # Disturb comparison from a config file, failing on acceptance checks
    fg-array-sim disturb --config my_config.json --out results --check

    # List bundled templates
    fg-array-sim templates

Exit codes:
    0 - Success
    2 - Configuration error
    3 - Experiment ran but an acceptance check failed (--check)
    4 - Internal error
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger

from .. import __version__
from ..errors import AcceptanceError, ConfigError
from ..settings import get_settings
from .config import parse_config
from .experiments import EXPERIMENTS, run_experiment
from .templates import TemplateEngine, resolve_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3
EXIT_INTERNAL = 4


def configure_logging(verbose: bool = False) -> None:
    logger.remove()
    level = "DEBUG" if verbose else get_settings().log_level
    logger.add(sys.stderr, level=level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fg-array-sim",
        description="Behavioral simulator of an analog-tunable floating-gate NOR-flash array",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  fg-array-sim sweep --config readout_sweep
  fg-array-sim tune --config tune_sequence --seed 7 --check
  fg-array-sim montecarlo --config montecarlo --workers 4
        """,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in EXPERIMENTS:
        cmd = sub.add_parser(name, help=f"Run the {name} experiment")
        cmd.add_argument("--config", required=True, help="Config file path or template name")
        cmd.add_argument("--seed", type=int, help="Override the config seed")
        cmd.add_argument("--out", help="Override the output directory")
        cmd.add_argument("--check", action="store_true", help="Exit 3 if acceptance checks fail")
        cmd.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
        if name == "montecarlo":
            cmd.add_argument("--workers", type=int, help="Worker processes")

    templates = sub.add_parser("templates", help="List bundled experiment templates")
    templates.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command, return the exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        if args.command == "templates":
            for info in TemplateEngine().list_templates():
                print(f"{info['name']:<20} {info['description']}")
            return EXIT_OK

        config = resolve_config(args.config)
        updates = {}
        if args.seed is not None:
            updates["seed"] = args.seed
        if args.out is not None:
            updates["output_dir"] = Path(args.out)
        if updates:
            config = parse_config({**config.model_dump(), **updates})

        result = run_experiment(
            args.command,
            config,
            check=args.check,
            workers=getattr(args, "workers", None),
        )
        for check_name, ok in result.checks.items():
            logger.info(f"  [{'OK' if ok else 'FAIL'}] {check_name}")
        return EXIT_OK

    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except AcceptanceError as e:
        logger.error(f"Acceptance check failed: {e}")
        return EXIT_ACCEPTANCE
    except Exception:
        logger.exception("Internal error")
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
