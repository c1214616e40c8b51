"""Deep BSDE solver with asymptotic-expansion priors, reflected and quadratic-growth variants."""

from .ae_prior import bs_call, bs_call_delta, leading_order_price, z_ae_basket, z_ae_calls
from .estimator import DeepBSDESolver
from .exceptions import ConfigurationError, CorrelationError, DomainError, TrainingError
from .experiments import REGISTRY, ExperimentConfig, get_experiment
from .market import CorrelationRoot, ModelSpec, PathBatch, build_correlation_root, sample_paths, terminal_payoff
from .oracles import bergman_purely_call_exact, cole_hopf_mc, european_mc
from .solver import RolloutConfig, TrainHistory, rollout, train

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "CorrelationError",
    "CorrelationRoot",
    "DeepBSDESolver",
    "DomainError",
    "ExperimentConfig",
    "ModelSpec",
    "PathBatch",
    "REGISTRY",
    "RolloutConfig",
    "TrainHistory",
    "TrainingError",
    "bergman_purely_call_exact",
    "bs_call",
    "bs_call_delta",
    "build_correlation_root",
    "cole_hopf_mc",
    "european_mc",
    "get_experiment",
    "leading_order_price",
    "rollout",
    "sample_paths",
    "terminal_payoff",
    "train",
    "z_ae_basket",
    "z_ae_calls",
]
