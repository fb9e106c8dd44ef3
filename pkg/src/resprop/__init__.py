"""Variance propagation in simplified residual networks.

Analytic predictions for forward, backward and gradient variances, checked
against Monte-Carlo simulation of the same networks.
"""

from .analytic import Kind, Prediction, PredictionTable, predict
from .model import (
    Activation,
    BlockKind,
    ConfigError,
    ContractError,
    DegenerateBatchError,
    Distribution,
    InitScheme,
    NetworkConfig,
    Scheme,
)
from .montecarlo import LayerStats, ToleranceConfig, compare, experiment_report, run_experiment
from .propagation import backward, forward
from .sampling import NetworkWeights, SeedPlan, sample_weights

__version__ = "0.1.0"

__all__ = [
    "Activation", "BlockKind", "ConfigError", "ContractError", "DegenerateBatchError",
    "Distribution", "InitScheme", "Kind", "LayerStats", "NetworkConfig", "NetworkWeights",
    "Prediction", "PredictionTable", "Scheme", "SeedPlan", "ToleranceConfig", "backward",
    "compare", "experiment_report", "forward", "predict", "run_experiment", "sample_weights",
]
