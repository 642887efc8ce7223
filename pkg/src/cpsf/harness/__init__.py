"""Configuration, artifact pipeline, evaluation and reports."""
from .config import ExperimentConfig, config_from_dict, load_config
from .evaluate import ExperimentReport, aggregate, evaluate

__all__ = ["ExperimentConfig", "ExperimentReport", "aggregate", "config_from_dict", "evaluate", "load_config"]
