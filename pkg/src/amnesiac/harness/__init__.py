"""Experiment harness: configuration, pipelines and the command line."""

from amnesiac.harness.config import ConfigError, ExperimentConfig, load_config
from amnesiac.harness.experiment import (
    ReportError,
    attack_only,
    report,
    run_experiment,
    sweep_removal_fraction,
    train_only,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ReportError",
    "attack_only",
    "load_config",
    "report",
    "run_experiment",
    "sweep_removal_fraction",
    "train_only",
]
