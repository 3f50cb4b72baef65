"""Command-line orchestration: configs, pipelines, result records and replay."""

from .config import EXPERIMENTS, ConfigError, ExperimentConfig, parse_config
from .record import ReplayReport, ResultRecord, load_record, replay, run_experiment

__all__ = ["EXPERIMENTS", "ConfigError", "ExperimentConfig", "parse_config", "ReplayReport",
           "ResultRecord", "load_record", "replay", "run_experiment"]
