"""Clustering longitudinal associations with finite mixtures of functional linear concurrent models."""

__version__ = "0.1.0"

from .fda import FunctionalDataset, MixtureParams, Responsibilities, SplineBasis, build_basis  # noqa: E402
from .penalty import PenaltyConfig, group_prox, scad  # noqa: E402
from .rem import FitResult, InitSpec, StopSpec, bootstrap_bands, composite_loglik, e_step, fit, initialize, m_step  # noqa: E402
from .tuning import TuningGrid, degrees_of_freedom, fit_with_lambda_path, select_K, select_rho_r  # noqa: E402

__all__ = [
    "FitResult",
    "FunctionalDataset",
    "InitSpec",
    "MixtureParams",
    "PenaltyConfig",
    "Responsibilities",
    "SplineBasis",
    "StopSpec",
    "TuningGrid",
    "bootstrap_bands",
    "build_basis",
    "composite_loglik",
    "degrees_of_freedom",
    "e_step",
    "fit",
    "fit_with_lambda_path",
    "group_prox",
    "initialize",
    "m_step",
    "scad",
    "select_K",
    "select_rho_r",
]
