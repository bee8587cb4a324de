"""Command-line harness: configuration, templates, experiment runners, output files."""

from .config import ExperimentConfig, config_hash, dump_config, load_config, parse_config
from .experiments import EXPERIMENTS, ExperimentResult, run_experiment

__all__ = [
    "ExperimentConfig",
    "config_hash",
    "dump_config",
    "load_config",
    "parse_config",
    "EXPERIMENTS",
    "ExperimentResult",
    "run_experiment",
]
