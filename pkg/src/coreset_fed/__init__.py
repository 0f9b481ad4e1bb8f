"""Bayesian coresets for personalised federated variational learning."""
__version__ = "0.1.0"

from .bnn import LabeledDataset, NetworkSpec
from .config import ExperimentConfig, load_config
from .coreset import CoresetWeights, LikelihoodEmbedding, aiht_solve
from .estimators import (
    AIHTCoreset, BayesianMLPClassifier, BayesianMLPRegressor, FederatedCoresetRegressor,
    SubsetSelector,
)
from .exceptions import (
    ConfigError, CoresetFedError, DimensionError, DomainError, IDXParseError,
)
from .federated import ClientState, FedConfig, run_federated
from .metrics import MetricsTrace, emit_metrics
from .runner import run_experiment
from .variational import MeanFieldGaussian

__all__ = [
    "AIHTCoreset", "BayesianMLPClassifier", "BayesianMLPRegressor", "ClientState",
    "ConfigError", "CoresetFedError", "CoresetWeights", "DimensionError", "DomainError",
    "ExperimentConfig", "FedConfig", "FederatedCoresetRegressor", "IDXParseError",
    "LabeledDataset", "LikelihoodEmbedding", "MeanFieldGaussian", "MetricsTrace",
    "NetworkSpec", "SubsetSelector", "aiht_solve", "emit_metrics", "load_config",
    "run_experiment", "run_federated",
]
