"""Summary-statistics loss, its gradient, and the penalty / dual norms."""
from __future__ import annotations

import numpy as np

from .core import ConvergenceFailure, NonFinite, PenaltySpec, TaskBundle, check_coef

POWER_TOL = 1e-10
POWER_MAX_ITERS = 10_000


def _columns_times_sigmas(bundle: TaskBundle, B: np.ndarray) -> np.ndarray:
    # column q of the result is sigma_q @ B[:, q]
    return np.matmul(bundle.sigmas, B.T[:, :, None])[:, :, 0].T


def loss(bundle: TaskBundle, B) -> float:
    """sum_q 1/2 b_q^T sigma_q b_q - <s_q, b_q>, with b_q the q-th column of B."""
    B = check_coef(B, bundle)
    SB = _columns_times_sigmas(bundle, B)
    return float(0.5 * np.sum(B * SB) - np.sum(bundle.scores * B))


def gradient(bundle: TaskBundle, B) -> np.ndarray:
    """(p, Q) gradient of :func:`loss`; column q is ``sigma_q b_q - s_q``."""
    B = check_coef(B, bundle)
    return _columns_times_sigmas(bundle, B) - bundle.scores


def _check_finite(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if not np.all(np.isfinite(M)):
        raise NonFinite("matrix has non-finite entries")
    return M


def penalty_norm(M, spec: PenaltySpec) -> float:
    """l2,1 norm (sum of row norms) or nuclear norm (sum of singular values)."""
    M = _check_finite(M)
    spec = PenaltySpec.parse(spec)
    if spec is PenaltySpec.GROUP_SPARSE:
        return float(np.linalg.norm(M, axis=1).sum())
    if M.size == 0:
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False).sum())


def spectral_norm(M, tol: float = POWER_TOL, max_iters: int = POWER_MAX_ITERS) -> float:
    """Largest singular value by power iteration on the smaller Gram matrix.

    The start vector is the normalized all-ones vector so results are
    reproducible. Iteration stops once the eigen-residual of the Gram matrix
    drops below ``tol`` times the current Rayleigh quotient. The result is
    accepted only if a Cholesky factorization certifies that no eigenvalue of
    the Gram matrix lies above it, since a start vector orthogonal to the top
    eigenvector converges elsewhere. Otherwise, or if the iteration does not
    settle within ``max_iters`` steps, a dense SVD is used.
    """
    M = _check_finite(M)
    if not np.any(M):
        return 0.0
    G = M.T @ M if M.shape[1] <= M.shape[0] else M @ M.T
    v = np.ones(G.shape[0]) / np.sqrt(G.shape[0])
    for _ in range(max_iters):
        w = G @ v
        theta = float(v @ w)
        if theta <= 0.0:
            # start vector orthogonal to the range of G
            break
        if np.linalg.norm(w - theta * v) <= tol * theta:
            if _bounds_spectrum(G, theta * (1.0 + 2.0 * tol)):
                return float(np.sqrt(theta))
            # converged to an eigenvalue below the top one
            break
        v = w / np.linalg.norm(w)
    try:
        return float(np.linalg.svd(M, compute_uv=False)[0])
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"operator norm failed: {exc}") from None


def _bounds_spectrum(G, level: float) -> bool:
    # True when level * I - G is positive definite
    try:
        np.linalg.cholesky(level * np.eye(G.shape[0]) - G)
    except np.linalg.LinAlgError:
        return False
    return True


def dual_norm(M, spec: PenaltySpec) -> float:
    """Dual of :func:`penalty_norm`: largest row norm, or operator norm."""
    M = _check_finite(M)
    spec = PenaltySpec.parse(spec)
    if spec is PenaltySpec.GROUP_SPARSE:
        if M.size == 0:
            return 0.0
        return float(np.linalg.norm(M, axis=1).max())
    return spectral_norm(M)
