"""Hybrid discrete diffusion: forward process, ELBO, samplers and scaling-law tooling."""

from .curves import ModelSpec, RunRecord, RunValidationError, flops_per_token, load_runs
from .denoisers import BayesOracleDenoiser, EnumerableDataset, MarginalDenoiser, TabularDenoiser, UniformDenoiser
from .elbo import BPB_PER_NAT, LambdaDistribution, nats_to_bpb, nelbo_monte_carlo, nelbo_quadrature
from .noise import MixingSchedule, Vocab, elbo_weight, forward_marginal, mixing_dist
from .planner import PlannerLaws, fit_hyperbola, plan_run
from .sampler import DenoiseSchedule, adaptive_sample, ancestral_sample
from .scaling import PowerLawRegressor, compute_optimal_laws, fit_power_law

__version__ = "0.1.0"

__all__ = [
    "BPB_PER_NAT", "BayesOracleDenoiser", "DenoiseSchedule", "EnumerableDataset", "LambdaDistribution",
    "MarginalDenoiser", "MixingSchedule", "ModelSpec", "PlannerLaws", "PowerLawRegressor", "RunRecord",
    "RunValidationError", "TabularDenoiser", "UniformDenoiser", "Vocab", "adaptive_sample", "ancestral_sample",
    "compute_optimal_laws", "elbo_weight", "fit_hyperbola", "fit_power_law", "flops_per_token",
    "forward_marginal", "load_runs", "mixing_dist", "nats_to_bpb", "nelbo_monte_carlo", "nelbo_quadrature",
    "plan_run",
]
