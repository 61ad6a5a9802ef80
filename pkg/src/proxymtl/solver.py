"""Proximal gradient solver for the penalized summary-statistics objective.

The objective for a bundle with scores ``s_q`` and covariances ``sigma_q`` is

    F(B) = sum_q 1/2 b_q^T sigma_q b_q - <s_q, b_q> + lam * P(B)

with ``P`` the l2,1 norm or the nuclear norm. Each iteration takes a plain
(unaccelerated) proximal gradient step ``B <- prox_{eta lam}(B - eta grad)``,
so with ``eta <= 1/L`` the objective trace is monotone.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .core import AUTO, FitConfig, NonFinite, PenaltySpec, TaskBundle, check_coef, validate_bundle
from .objective import dual_norm, gradient, penalty_norm
from .prox import prox, shrink_factors, shrink_spectrum, thin_svd

log = logging.getLogger(__name__)

# how often (in iterations) to test for an objective that is unbounded below
_DIVERGENCE_CHECK_EVERY = 50


class Divergence(NonFinite):
    """The objective is unbounded below (or blew up) for this lambda."""


@dataclass
class FitResult:
    B_hat: np.ndarray
    objective_trace: List[float]
    iterations: int
    converged: bool
    lam: float
    step_size: float = field(default=np.nan)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def lipschitz_bound(bundle: TaskBundle) -> float:
    """Largest eigenvalue over the task covariances.

    The loss Hessian is block diagonal with blocks ``sigma_q``, so this is
    the Lipschitz constant of the gradient in Frobenius norm.
    """
    return max(dual_norm(t.sigma, PenaltySpec.LOW_RANK) for t in bundle.tasks)


def _prox_and_norm(M, t, spec):
    # returns prox_t(M) together with its penalty value, sparing a second SVD
    if spec is PenaltySpec.GROUP_SPARSE:
        norms = np.linalg.norm(M, axis=1)
        scale = shrink_factors(norms, t)
        return M * scale[:, None], float(np.sum(norms * scale))
    U, s, V = thin_svd(M)
    shrunk, keep = shrink_spectrum(s, t)
    Z = (U[:, keep] * shrunk[keep]) @ V[:, keep].T
    return Z, float(shrunk.sum())


def _times_sigmas(sigmas, B):
    return np.matmul(sigmas, B.T[:, :, None])[:, :, 0].T


def fixed_point_gap(bundle: TaskBundle, spec, lam: float, B, step_size: float) -> float:
    """``||B - prox_{eta lam}(B - eta grad L(B))||_F``; zero exactly at a minimizer."""
    spec = PenaltySpec.parse(spec)
    B = check_coef(B, bundle)
    Z = prox(B - step_size * gradient(bundle, B), step_size * lam, spec)
    return float(np.linalg.norm(B - Z))


def resolve_step(bundle: TaskBundle, config: FitConfig, lipschitz: Optional[float] = None) -> float:
    if config.step_size != AUTO:
        return float(config.step_size)
    L = lipschitz_bound(bundle) if lipschitz is None else lipschitz
    return 1.0 / L if L > 0 else 1.0


def fit(bundle: TaskBundle, spec, lam: float, config: FitConfig = FitConfig(),
        init=None, lipschitz: Optional[float] = None) -> FitResult:
    """Minimize the penalized objective for one value of ``lam``.

    Parameters
    ----------
    bundle : validated TaskBundle
    spec : PenaltySpec or "sparse" / "lowrank"
    lam : penalty level, >= 0
    config : step size, iteration budget and tolerance
    init : optional (p, Q) warm start; zeros by default
    lipschitz : precomputed :func:`lipschitz_bound`, to skip recomputing it

    The run stops when the objective changes by at most
    ``tol * (1 + |obj|)`` *and* the last step has Frobenius norm at most
    ``10 * tol``. The second condition makes the fixed-point gap of the
    returned iterate no larger than ``10 * tol``.

    Raises
    ------
    NonFinite
        The objective overflowed (usually a step size that is too large).
    Divergence
        The iterates run off along a direction in the joint null space of the
        covariances on which the objective decreases linearly; the problem has
        no minimizer at this ``lam``.
    """
    spec = PenaltySpec.parse(spec)
    lam = float(lam)
    if not lam >= 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    L = lipschitz_bound(bundle) if lipschitz is None else float(lipschitz)
    eta = resolve_step(bundle, config, L)
    tol = config.tol
    S = bundle.scores
    sigmas = bundle.sigmas
    if init is None:
        B = np.zeros((bundle.p, bundle.Q))
        pen = 0.0
    else:
        B = check_coef(init, bundle).copy()
        pen = penalty_norm(B, spec)
    SB = _times_sigmas(sigmas, B)
    obj = 0.5 * float(np.sum(B * SB)) - float(np.sum(S * B)) + lam * pen
    trace = [obj]
    null_bases = None
    converged = False
    k = 0
    for k in range(1, config.max_iters + 1):
        B_new, pen = _prox_and_norm(B - eta * (SB - S), eta * lam, spec)
        SB_new = _times_sigmas(sigmas, B_new)
        obj_new = 0.5 * float(np.sum(B_new * SB_new)) - float(np.sum(S * B_new)) + lam * pen
        if not np.isfinite(obj_new):
            raise NonFinite(f"objective became non-finite at iteration {k} "
                            f"(step size {eta:g} may be too large)")
        trace.append(obj_new)
        d = B_new - B
        step = float(np.linalg.norm(d))
        if abs(obj_new - obj) <= tol * (1.0 + abs(obj)) and step <= 10 * tol:
            B = B_new
            converged = True
            break
        if (k % _DIVERGENCE_CHECK_EVERY == 0 and k >= 2 * _DIVERGENCE_CHECK_EVERY and step > 0
                and float(np.linalg.norm(SB_new - SB)) <= 1e-2 * L * step):
            if null_bases is None:
                null_bases = _null_bases(sigmas)
            if _unbounded_along(d, null_bases, S, lam, spec):
                raise Divergence(f"objective is unbounded below at lambda={lam:g}")
        B, SB, obj = B_new, SB_new, obj_new
    if not converged:
        log.debug("fit at lambda=%g stopped after %d iterations without converging", lam, k)
    return FitResult(B_hat=B, objective_trace=trace, iterations=k, converged=converged,
                     lam=lam, step_size=eta)


def _null_bases(sigmas):
    bases = []
    for sig in sigmas:
        w, V = np.linalg.eigh(sig)
        bases.append(V[:, w <= 1e-9 * max(float(w[-1]), 1e-300)])
    return bases


def _unbounded_along(d, null_bases, S, lam, spec) -> bool:
    """True if the null-space part D of ``d`` certifies ``<S, D> > lam * P(D)``.

    With ``sigma_q D e_q = 0`` for every q the loss is linear along D, so
    ``F(B + t D) <= F(B) - t (<S, D> - lam P(D))`` decreases without bound.
    """
    if all(N.shape[1] == 0 for N in null_bases):
        return False
    D = np.column_stack([N @ (N.T @ d[:, q]) for q, N in enumerate(null_bases)])
    size = float(np.linalg.norm(D))
    if size == 0.0:
        return False
    excess = float(np.sum(S * D)) - lam * penalty_norm(D, spec)
    return excess > 1e-8 * float(np.linalg.norm(S)) * size


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a non-empty 1-d sequence")
    if np.any(grid < 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and nonnegative")
    return grid


def fit_path(bundle: TaskBundle, spec, grid: Sequence[float],
             config: FitConfig = FitConfig()) -> List[FitResult]:
    """Fit every lambda in the ascending ``grid`` with warm starts.

    Fits run from the largest lambda down, each initialized at the previous
    solution; results come back aligned with ``grid``.
    """
    grid = _check_grid(grid)
    L = lipschitz_bound(bundle)
    results = [None] * grid.size
    init = None
    for j in range(grid.size - 1, -1, -1):
        res = fit(bundle, spec, grid[j], config, init=init, lipschitz=L)
        results[j] = res
        init = res.B_hat
    return results


def individual_bundle(X_list, Y_list) -> TaskBundle:
    """Bundle whose covariances come from the discovery designs themselves."""
    from .simgen import summarize

    if len(X_list) != len(Y_list):
        raise ValueError("X_list and Y_list must have the same length")
    return validate_bundle(TaskBundle(tuple(summarize(X, Y, X) for X, Y in zip(X_list, Y_list))))


def fit_individual(X_list, Y_list, spec, lam: float, config: FitConfig = FitConfig()) -> FitResult:
    """Penalized multi-task least squares on individual-level data.

    The summary objective built from ``s_q = X_q^T Y_q / n_q`` and
    ``sigma_q = X_q^T X_q / n_q`` differs from
    ``sum_q ||Y_q - X_q b_q||^2 / (2 n_q)`` only by a constant, so this is
    the same minimizer.
    """
    return fit(individual_bundle(X_list, Y_list), spec, lam, config)
