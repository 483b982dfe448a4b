"""Experiment orchestration: configs, sweeps, mitigation study, acceptance suites."""

from .config import ExperimentConfig, config_from_dict, default_config, load_config
from .runner import check_determinism, mitigation_study, report, run_experiment

__all__ = [
    "ExperimentConfig",
    "check_determinism",
    "config_from_dict",
    "default_config",
    "load_config",
    "mitigation_study",
    "report",
    "run_experiment",
]
