"""Proximal operators of the l2,1 and nuclear norms."""
from __future__ import annotations

import numpy as np

from .core import NonFinite, PenaltySpec, ProxyMTLError


class NegativeThreshold(ProxyMTLError, ValueError):
    pass


class SVDFailure(ProxyMTLError, RuntimeError):
    pass


def _check_threshold(t) -> float:
    t = float(t)
    if not t >= 0:
        raise NegativeThreshold(f"threshold must be nonnegative, got {t}")
    return t


# Values within a few ulps of the threshold are indistinguishable from it in
# floating point; they are sent to zero so that lambda at (a rounded)
# lambda_max still yields an exactly zero solution.
_ROUNDOFF = 8 * np.finfo(float).eps


def shrink_factors(norms: np.ndarray, t: float) -> np.ndarray:
    """Row scales ``max(0, 1 - t / norm)``; zero rows and rows at the threshold map to 0."""
    scale = np.zeros_like(norms)
    nz = norms - t > _ROUNDOFF * norms
    scale[nz] = 1.0 - t / norms[nz]
    return scale


def shrink_spectrum(s: np.ndarray, t: float):
    """Soft-thresholded singular values and the mask of those that survive."""
    shrunk = np.maximum(s - t, 0.0)
    keep = shrunk > _ROUNDOFF * (s[0] if s.size else 0.0)
    return np.where(keep, shrunk, 0.0), keep


def group_soft_threshold(M, t) -> np.ndarray:
    """Shrink every row of ``M`` towards zero by ``t`` in l2 norm.

    Row i becomes ``max(0, 1 - t / ||M_i||) * M_i``; a zero row stays zero.
    """
    t = _check_threshold(t)
    M = np.asarray(M, dtype=float)
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    return M * shrink_factors(norms, t)


def thin_svd(M):
    """Thin SVD ``M = U diag(s) V^T`` with ``s`` nonincreasing.

    Returns ``(U, s, V)`` with ``U`` of shape (p, k), ``V`` of shape (Q, k),
    k = min(p, Q).
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NonFinite("cannot decompose a matrix with non-finite entries")
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SVDFailure(str(exc)) from None
    return U, s, Vt.T


def svt(M, t) -> np.ndarray:
    """Singular value thresholding: soft-threshold the spectrum of ``M`` by ``t``."""
    t = _check_threshold(t)
    U, s, V = thin_svd(M)
    shrunk, keep = shrink_spectrum(s, t)
    if not np.any(keep):
        return np.zeros_like(np.asarray(M, dtype=float))
    return (U[:, keep] * shrunk[keep]) @ V[:, keep].T


def prox(M, t, spec: PenaltySpec) -> np.ndarray:
    """Proximal map of ``t * penalty_norm(., spec)``."""
    if PenaltySpec.parse(spec) is PenaltySpec.GROUP_SPARSE:
        return group_soft_threshold(M, t)
    return svt(M, t)
