"""Hierarchical model families and their compiled log-posterior kernels."""

from .families import (
    FAMILIES,
    RIDGE_SWEEP,
    Model,
    ModelSpec,
    ModelSpecError,
    ParamLayout,
    PriorConfig,
    build_model,
    conditional_site_means,
    full_data_lp,
    independent_full_data_lp,
    interactions_lp,
    joint_summary_lp,
    ridge_site_lp,
    rubin_lp,
)

__all__ = [
    "FAMILIES", "RIDGE_SWEEP", "Model", "ModelSpec", "ModelSpecError", "ParamLayout",
    "PriorConfig", "build_model", "conditional_site_means", "full_data_lp",
    "independent_full_data_lp", "interactions_lp", "joint_summary_lp", "ridge_site_lp", "rubin_lp",
]
