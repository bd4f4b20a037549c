"""Linear-time inference and learning for Markovian (state-space) Gaussian processes."""

from . import (
    cubature,
    datasets,
    engine,
    harness,
    kernels,
    likelihoods,
    sites,
    spatiotemporal,
)
from .engine import (
    RuleConfig,
    TemporalGP,
    fit_hyperparameters,
    forward_filter,
    negative_log_predictive_density,
    run_inference,
)

__all__ = [
    "cubature",
    "datasets",
    "engine",
    "harness",
    "kernels",
    "likelihoods",
    "sites",
    "spatiotemporal",
    "RuleConfig",
    "TemporalGP",
    "fit_hyperparameters",
    "forward_filter",
    "negative_log_predictive_density",
    "run_inference",
]
