#!/usr/bin/env python3
"""
Experiment Configuration Validator

Validates fg-array-sim experiment configs and bundled templates.
Designed for CI pipelines and pre-commit hooks.

Usage:
    # Validate a config file
    python scripts/validate_config.py --config my_config.json

    # Validate a bundled template by name
    python scripts/validate_config.py --config tune_sequence

    # Validate every bundled template
    python scripts/validate_config.py --all-templates --verbose

Exit codes:
    0 - All validations passed
    1 - Validation failed
    2 - Config file or template not found
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Tuple

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from fg_array_sim.errors import ConfigError  # noqa: E402
from fg_array_sim.harness.config import ExperimentConfig, parse_config  # noqa: E402
from fg_array_sim.harness.templates import TemplateEngine  # noqa: E402


class ValidationError:
    def __init__(self, level: str, message: str, path: str = ""):
        self.level = level  # "error", "warning", "info"
        self.message = message
        self.path = path

    def __str__(self):
        prefix = {"error": "[ERROR]", "warning": "[WARN]", "info": "[INFO]"}[self.level]
        if self.path:
            return f"  {prefix} [{self.path}] {self.message}"
        return f"  {prefix} {self.message}"


def validate_schema(data: Dict) -> Tuple[ExperimentConfig, List[ValidationError]]:
    """Run the pydantic schema; returns (config or None, errors)."""
    try:
        return parse_config(data), []
    except ConfigError as e:
        return None, [ValidationError("error", str(e))]


def noisy_experiments(config: ExperimentConfig) -> List[str]:
    """Experiments that refuse to run without a seed under this config."""
    names = ["tune", "montecarlo"]
    if config.vmm.mode == "tuned" or config.device.variability_sigma > 0.0:
        names.append("vmm")
    return names


def validate_semantics(config: ExperimentConfig) -> List[ValidationError]:
    """Checks the schema accepts but that usually indicate a mistake."""
    errors = []

    if config.seed is None:
        errors.append(ValidationError(
            "warning",
            f"No seed set; {', '.join(noisy_experiments(config))} will refuse to run",
            "seed"))

    if config.tune.initial == "erase":
        errors.append(ValidationError(
            "info", "initial erase recharges cells sharing the selected gate line", "tune"))

    if config.tuning.backoff_steps != 4:
        errors.append(ValidationError(
            "info", f"backoff_steps={config.tuning.backoff_steps} (default 4)", "tuning"))

    if 0.0 not in config.montecarlo.sigmas:
        errors.append(ValidationError(
            "warning", "Monte Carlo ladder has no nominal (sigma=0) rung", "montecarlo"))

    return errors


def load_raw(source: str, engine: TemplateEngine) -> Tuple[Dict, List[ValidationError]]:
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            return None, [ValidationError("error", f"Config file not found: {path}")]
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            return None, [ValidationError("error", f"Invalid JSON: {e}")]
    else:
        try:
            data = engine.load_template(source)
        except ConfigError as e:
            return None, [ValidationError("error", str(e))]
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]
    if not isinstance(data, dict):
        return {}, [ValidationError("error", "Config root must be an object")]
    return data, []


def validate_source(source: str, engine: TemplateEngine) -> Tuple[bool, List[ValidationError]]:
    data, errors = load_raw(source, engine)
    if data is None:
        return False, errors
    if not errors:
        config, errors = validate_schema(data)
        if config is not None:
            errors.extend(validate_semantics(config))
    return not any(e.level == "error" for e in errors), errors


def main():
    parser = argparse.ArgumentParser(description="Validate fg-array-sim experiment configs")
    parser.add_argument("--config", help="Config file path or template name")
    parser.add_argument("--all-templates", action="store_true", help="Validate every template")
    parser.add_argument("--templates-dir", help="Templates directory override")
    parser.add_argument("--verbose", "-v", action="store_true", help="Show info messages too")
    parser.add_argument("--strict", action="store_true", help="Treat warnings as errors")

    args = parser.parse_args()
    if not args.config and not args.all_templates:
        parser.error("give --config or --all-templates")

    print("")
    print("=" * 60)
    print("  FG-ARRAY-SIM CONFIGURATION VALIDATOR")
    print("=" * 60)
    print("")

    try:
        engine = TemplateEngine(Path(args.templates_dir) if args.templates_dir else None)
    except ConfigError as e:
        print(f"  {e}")
        sys.exit(2)

    sources = [t["name"] for t in engine.list_templates()] if args.all_templates else []
    if args.config:
        sources.append(args.config)

    exit_code = 0
    error_count = warning_count = 0
    for source in sources:
        print(f"  Validating: {source}")
        passed, errors = validate_source(source, engine)
        for error in errors:
            if error.level == "info" and not args.verbose:
                continue
            print(str(error))
        error_count += sum(1 for e in errors if e.level == "error")
        warning_count += sum(1 for e in errors if e.level == "warning")
        if not passed:
            missing = any("not found" in e.message for e in errors)
            exit_code = max(exit_code, 2 if missing else 1)

    print("")
    if args.strict and warning_count > 0 and exit_code == 0:
        exit_code = 1

    if exit_code == 0:
        print("  ✅ VALIDATION PASSED")
        if warning_count > 0:
            print(f"     ({warning_count} warning(s))")
    else:
        print("  ❌ VALIDATION FAILED")
        print(f"     {error_count} error(s), {warning_count} warning(s)")

    print("")
    sys.exit(exit_code)


if __name__ == "__main__":
    main()
