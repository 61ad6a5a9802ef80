"""Choosing lambda: Lepski-type adaptive selection and hold-out validation.

The adaptive rule needs only summary statistics. For an ascending grid
``l_1 < ... < l_M`` it picks the smallest ``l_j`` such that every pair of
fits at or above ``l_j`` has gradients within ``cbar * (l' + l'')`` of each
other in the dual norm.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import DimensionMismatch, FitConfig, PenaltySpec, TaskBundle
from .objective import dual_norm, gradient
from .solver import Divergence, FitResult, _check_grid, fit, lipschitz_bound


class EmptyGrid(ValueError):
    pass


def lambda_max(bundle: TaskBundle, spec) -> float:
    """Smallest lambda whose solution is the zero matrix: dual norm of the gradient at 0."""
    return dual_norm(bundle.scores, PenaltySpec.parse(spec))


def default_grid(bundle: TaskBundle, spec, size: int = 20, min_ratio: float = 0.01) -> np.ndarray:
    """``size`` log-spaced values from ``min_ratio * lambda_max`` to ``lambda_max``."""
    if size < 1:
        raise EmptyGrid("grid size must be at least 1")
    if not 0 < min_ratio <= 1:
        raise ValueError("min_ratio must lie in (0, 1]")
    top = lambda_max(bundle, spec)
    if top <= 0:
        raise ValueError("all score vectors are zero; lambda_max is 0")
    if size == 1:
        return np.array([top])
    return np.geomspace(min_ratio * top, top, size)


@dataclass
class LepskiReport:
    chosen_lambda: float
    chosen_index: int
    pairwise_gaps: np.ndarray
    cbar: float
    feasible_set: List[bool]


def pairwise_gap_matrix(bundle: TaskBundle, path: Sequence[FitResult], spec) -> np.ndarray:
    """Entry (j, k) is ``dual_norm(grad L(B_j) - grad L(B_k))``."""
    spec = PenaltySpec.parse(spec)
    grads = [gradient(bundle, r.B_hat) for r in path]
    M = len(grads)
    gaps = np.zeros((M, M))
    for j in range(M):
        for k in range(j + 1, M):
            gaps[j, k] = gaps[k, j] = dual_norm(grads[j] - grads[k], spec)
    return gaps


def _feasible_from(gaps: np.ndarray, grid: np.ndarray, cbar: float) -> int:
    # Scan down from the top; index j stays feasible while every pair (j, k),
    # k >= j, passes. The first failure ends the scan.
    M = grid.size
    lowest = M - 1
    for j in range(M - 2, -1, -1):
        if np.all(gaps[j, j:] <= cbar * (grid[j] + grid[j:])):
            lowest = j
        else:
            break
    return lowest


def lepski_select(bundle: TaskBundle, path: Sequence[FitResult], grid, spec,
                  cbar: float = 1.0) -> LepskiReport:
    """Adaptive choice of lambda from a fitted path aligned with ``grid``.

    Index j is feasible when all pairs ``j', j'' >= j`` satisfy
    ``gap(j', j'') <= cbar * (l_j' + l_j'')``; the chosen index is the
    smallest feasible one. The largest grid value is always feasible.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise EmptyGrid("empty lambda grid")
    grid = _check_grid(grid)
    if len(path) != grid.size:
        raise DimensionMismatch(f"path has {len(path)} fits but grid has {grid.size} values")
    if not cbar > 0:
        raise ValueError("cbar must be positive")
    gaps = pairwise_gap_matrix(bundle, path, spec)
    j = _feasible_from(gaps, grid, cbar)
    feasible = [i >= j for i in range(grid.size)]
    return LepskiReport(float(grid[j]), j, gaps, float(cbar), feasible)


def lepski_scan(bundle: TaskBundle, spec, grid, cbar: float = 1.0,
                config: FitConfig = FitConfig()) -> Tuple[int, List[Optional[FitResult]]]:
    """Lepski selection that fits lazily from the top of the grid.

    Fits are computed in descending order and the scan stops at the first
    infeasible index, so lambdas below it are never fitted. A fit that
    diverges counts as infeasible. Returns the chosen index and the fits
    (``None`` where nothing was computed).
    """
    spec = PenaltySpec.parse(spec)
    grid = _check_grid(grid)
    M = grid.size
    L = lipschitz_bound(bundle)
    fits: List[Optional[FitResult]] = [None] * M
    grads = [None] * M
    init = None
    chosen = M - 1
    for j in range(M - 1, -1, -1):
        try:
            res = fit(bundle, spec, grid[j], config, init=init, lipschitz=L)
        except Divergence:
            break
        g = gradient(bundle, res.B_hat)
        ok = all(dual_norm(g - grads[k], spec) <= cbar * (grid[j] + grid[k]) for k in range(j + 1, M))
        if not ok:
            break
        fits[j], grads[j], init, chosen = res, g, res.B_hat, j
    return chosen, fits


def holdout_errors(path: Sequence[FitResult], X_list, Y_list) -> np.ndarray:
    """Total hold-out squared error ``sum_q ||Y_q - X_q b_q||^2`` for every fit."""
    if not path:
        raise EmptyGrid("empty path")
    p, Q = path[0].B_hat.shape
    if len(X_list) != Q or len(Y_list) != Q:
        raise DimensionMismatch(f"hold-out data covers {len(X_list)} tasks, expected {Q}")
    Xs = [np.asarray(X, dtype=float) for X in X_list]
    Ys = [np.asarray(Y, dtype=float).reshape(-1) for Y in Y_list]
    for q, (X, Y) in enumerate(zip(Xs, Ys)):
        if X.ndim != 2 or X.shape[1] != p or X.shape[0] != Y.shape[0]:
            raise DimensionMismatch(f"task {q}: hold-out shapes {X.shape}, {Y.shape} vs p={p}")
    errs = np.empty(len(path))
    for j, r in enumerate(path):
        errs[j] = sum(float(np.sum((Y - X @ r.B_hat[:, q]) ** 2)) for q, (X, Y) in enumerate(zip(Xs, Ys)))
    return errs


def holdout_select(path: Sequence[FitResult], grid, X_list, Y_list) -> Tuple[float, int]:
    """Grid value with the smallest hold-out error; ties go to the larger lambda."""
    grid = np.asarray(grid, dtype=float)
    if len(path) != grid.size:
        raise DimensionMismatch(f"path has {len(path)} fits but grid has {grid.size} values")
    errs = holdout_errors(path, X_list, Y_list)
    j = int(np.flatnonzero(errs == errs.min()).max())
    return float(grid[j]), j
