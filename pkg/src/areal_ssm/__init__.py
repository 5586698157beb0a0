"""Bayesian spatiotemporal Poisson state-space models for areal count data."""

__version__ = "0.1.0"

from .effbs import GaussianObservation, Observation, StateBelief, backward_sample, forward_filter
from .mcmc import ChainConfig, PriorConfig, Trace, gelman_rubin, run_chain, run_chains
from .model_compare import bayes_factor_matrix, compare_models, joint_log_predictive, one_step_predictive
from .model_spec import Family, HyperParams, SpecId, assemble_system
from .spatial_graph import RegionGraph, build_neighborhood_matrix

__all__ = [
    "ChainConfig", "Family", "GaussianObservation", "HyperParams", "Observation", "PriorConfig",
    "RegionGraph", "SpecId", "StateBelief", "Trace", "assemble_system", "backward_sample",
    "bayes_factor_matrix", "build_neighborhood_matrix", "compare_models", "forward_filter",
    "gelman_rubin", "joint_log_predictive", "one_step_predictive", "run_chain", "run_chains",
]
