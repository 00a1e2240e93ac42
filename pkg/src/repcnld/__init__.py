"""Replica-exchange preconditioned Crank-Nicolson Langevin samplers for
multimodal targets and PDE-constrained Bayesian inverse problems."""

__version__ = "0.1.0"

from .dynamics import (
    ChainState,
    SamplerTrace,
    StepSchedule,
    SwapPolicy,
    TemperatureLadder,
    beta_from_delta,
    corrected_swap_statistic,
    pcnld_step,
    run_replica_exchange,
    run_single_chain,
    swap_statistic,
)
from .priors import (
    GaussianPrior,
    KLBasis,
    MaternParams,
    factorize_covariance,
    field_from_coeffs,
    kl_decompose,
    matern_cov,
    sample_prior,
)
from .targets import (
    BayesianPosterior,
    Fidelity,
    GaussianMixture,
    GaussianMixtureModel,
    TargetModel,
    mixture_grad_log_density,
    mixture_log_density,
    mixture_potential,
    posterior_energy,
    posterior_potential,
)

__all__ = [
    "ChainState", "SamplerTrace", "StepSchedule", "SwapPolicy", "TemperatureLadder",
    "beta_from_delta", "corrected_swap_statistic", "pcnld_step",
    "run_replica_exchange", "run_single_chain", "swap_statistic",
    "GaussianPrior", "KLBasis", "MaternParams", "factorize_covariance",
    "field_from_coeffs", "kl_decompose", "matern_cov", "sample_prior",
    "BayesianPosterior", "Fidelity", "GaussianMixture", "GaussianMixtureModel",
    "TargetModel", "mixture_grad_log_density", "mixture_log_density",
    "mixture_potential", "posterior_energy", "posterior_potential",
]
