"""Multi-task linear regression fitted from summary statistics.

Each task contributes a score vector ``s = X^T Y / n`` and a covariance
estimate taken from a (possibly different) reference sample. Rows of the
coefficient matrix are shared through an l2,1 penalty, or its rank is
controlled through the nuclear norm.
"""
from .core import (FitConfig, PenaltySpec, TaskBundle, TaskSummary, load_bundle, save_bundle,
                   validate_bundle)
from .objective import dual_norm, gradient, loss, penalty_norm
from .prox import group_soft_threshold, prox, svt
from .solver import Divergence, FitResult, fit, fit_individual, fit_path
from .tuning import default_grid, holdout_select, lambda_max, lepski_select

__all__ = [
    "FitConfig", "PenaltySpec", "TaskBundle", "TaskSummary", "load_bundle", "save_bundle",
    "validate_bundle", "dual_norm", "gradient", "loss", "penalty_norm", "group_soft_threshold",
    "prox", "svt", "Divergence", "FitResult", "fit", "fit_individual", "fit_path", "default_grid",
    "holdout_select", "lambda_max", "lepski_select",
]
