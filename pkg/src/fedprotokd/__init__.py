"""Desk-scale simulator of heterogeneous federated learning with dual
(logit + prototype) distillation and a margin-trained server prototype
generator."""

__version__ = "0.1.0"

from .config import ExperimentConfig, parse_config
from .orchestrator import RoundRecord, Simulation, evaluate, prototype_margin, run_experiment

__all__ = [
    "ExperimentConfig",
    "RoundRecord",
    "Simulation",
    "evaluate",
    "parse_config",
    "prototype_margin",
    "run_experiment",
]
