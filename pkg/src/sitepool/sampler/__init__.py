"""No-U-Turn sampling, multi-chain orchestration and convergence diagnostics."""

from .core import (
    DIVERGENCE_FLAG_RATE,
    RHAT_THRESHOLD,
    GradientCheckError,
    InitializationError,
    PosteriorDraws,
    SamplerConfig,
    TargetDensity,
    chain_rngs,
    check_gradient,
    finite_difference_gradient,
    nuts_sample,
    run_chains,
)
from .diagnostics import ess, ess_and_mcse, split_rhat

__all__ = [
    "DIVERGENCE_FLAG_RATE", "RHAT_THRESHOLD", "GradientCheckError", "InitializationError",
    "PosteriorDraws", "SamplerConfig", "TargetDensity", "chain_rngs", "check_gradient", "ess",
    "ess_and_mcse", "finite_difference_gradient", "nuts_sample", "run_chains", "split_rhat",
]
