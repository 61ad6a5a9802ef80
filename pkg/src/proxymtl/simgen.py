"""Synthetic multi-task data with controlled proxy size, overlap and shift.

Each task draws a discovery sample ``X ~ N(0, sigma1)``, ``Y = X beta + eps``
and a proxy sample ``Xt`` of size ``n_tilde`` whose first
``floor(rho * n_tilde)`` rows are copied from ``X`` and whose remaining rows
are fresh draws from ``N(0, sigma2)``.

All randomness goes through :func:`substream`, which derives independent
generators from one integer seed and a tuple of names, so a replication can
be regenerated on its own.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .core import DimensionMismatch, PenaltySpec, ProxyMTLError, TaskBundle, TaskSummary, validate_bundle
from .objective import dual_norm, gradient


class InvalidKind(ProxyMTLError, ValueError):
    pass


class OverlapWithShift(ProxyMTLError, ValueError):
    pass


class TargetUnreachable(ProxyMTLError, RuntimeError):
    pass


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``; keys may be ints or strings."""
    words = []
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode()))
        else:
            words.append(int(k))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(words)))


# -- scenario description -------------------------------------------------------

@dataclass(frozen=True)
class CoefKind:
    """``sparse`` with ``size`` nonzero rows, or ``lowrank`` with rank ``size``."""

    kind: str = "sparse"
    size: int = 10

    def __post_init__(self):
        if self.kind not in ("sparse", "lowrank"):
            raise InvalidKind(f"unknown coefficient kind {self.kind!r}")
        if int(self.size) < 0 or (self.kind == "lowrank" and int(self.size) < 1):
            raise InvalidKind(f"invalid {self.kind} size {self.size}")


@dataclass(frozen=True)
class CovSpec:
    """Population covariance: ``identity``, ``ar1`` (param = phi) or
    ``shifted`` (param = target ||sigma1 - sigma2||_F, proxy side only)."""

    kind: str = "identity"
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "ar1", "shifted"):
            raise InvalidKind(f"unknown covariance kind {self.kind!r}")
        if self.kind == "ar1" and not abs(self.param) < 1:
            raise InvalidKind("AR(1) coefficient must lie in (-1, 1)")
        if self.kind == "shifted" and self.param < 0:
            raise InvalidKind("shift target must be nonnegative")

    def is_shift(self) -> bool:
        return self.kind == "shifted" and self.param > 0


@dataclass(frozen=True)
class ScenarioConfig:
    p: int = 100
    Q: int = 8
    n: int = 100
    n_tilde: int = 100
    rho: float = 0.0
    coef_kind: CoefKind = CoefKind()
    sigma1: CovSpec = CovSpec()
    sigma2: CovSpec = CovSpec()
    noise_sd: float = 1.0
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.coef_kind, dict):
            object.__setattr__(self, "coef_kind", CoefKind(**self.coef_kind))
        for name in ("sigma1", "sigma2"):
            if isinstance(getattr(self, name), dict):
                object.__setattr__(self, name, CovSpec(**getattr(self, name)))
        if min(self.p, self.Q, self.n, self.n_tilde) < 1:
            raise ValueError("dimensions and sample sizes must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.sigma1.kind == "shifted":
            raise InvalidKind("the discovery covariance cannot be a shift")
        same_cov = not self.sigma2.is_shift() and (self.sigma2.kind == "shifted" or self.sigma1 == self.sigma2)
        if self.n_overlap > 0 and not same_cov:
            raise OverlapWithShift("overlapping rows cannot follow two different covariances")
        if self.n_overlap > self.n:
            raise ValueError(f"floor(rho * n_tilde) = {self.n_overlap} exceeds n = {self.n}")
        if self.coef_kind.kind == "sparse" and self.coef_kind.size > self.p:
            raise InvalidKind("more nonzero rows than features")
        if self.coef_kind.kind == "lowrank" and self.coef_kind.size > min(self.p, self.Q):
            raise InvalidKind("rank exceeds min(p, Q)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")

    @property
    def n_overlap(self) -> int:
        return int(math.floor(self.rho * self.n_tilde + 1e-9))

    @property
    def tau(self) -> float:
        return self.n_tilde / self.n

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(**d)


# -- ground truth ---------------------------------------------------------------

def gen_coef(p: int, Q: int, coef_kind: CoefKind, rng: np.random.Generator) -> np.ndarray:
    """Row-sparse (shared support) or low-rank coefficient matrix.

    ``sparse``: ``size`` rows picked uniformly without replacement, entries
    i.i.d. N(0, 1). ``lowrank``: ``U V^T / sqrt(r)`` with Gaussian factors.
    """
    if coef_kind.kind == "sparse":
        s = coef_kind.size
        if s > p:
            raise InvalidKind("more nonzero rows than features")
        B = np.zeros((p, Q))
        rows = np.sort(rng.choice(p, size=s, replace=False))
        B[rows] = rng.standard_normal((s, Q))
        return B
    if coef_kind.kind == "lowrank":
        r = coef_kind.size
        if not 1 <= r <= min(p, Q):
            raise InvalidKind(f"rank {r} outside [1, min(p, Q)]")
        U = rng.standard_normal((p, r))
        V = rng.standard_normal((Q, r))
        return U @ V.T / np.sqrt(r)
    raise InvalidKind(f"unknown coefficient kind {coef_kind.kind!r}")


def population_cov(p: int, spec: CovSpec) -> np.ndarray:
    if spec.kind == "identity" or spec.kind == "shifted":
        return np.eye(p)
    idx = np.arange(p)
    return spec.param ** np.abs(idx[:, None] - idx[None, :])


def make_shifted_cov(sigma1, target_frob: float, rng: np.random.Generator,
                     max_iters: int = 50, rtol: float = 1e-3) -> np.ndarray:
    """PSD matrix at Frobenius distance ``target_frob`` (within 1%) from ``sigma1``.

    A random symmetric direction ``E`` is scaled by ``t`` and the result
    projected onto the PSD cone; ``t`` is found by bisection so that the
    projected matrix lands at the requested distance.
    """
    sigma1 = np.asarray(sigma1, dtype=float)
    if target_frob < 0:
        raise ValueError("target_frob must be nonnegative")
    if target_frob == 0:
        return sigma1.copy()
    p = sigma1.shape[0]
    A = rng.standard_normal((p, p))
    E = (A + A.T) / 2
    E /= np.linalg.norm(E)

    if np.allclose(sigma1, sigma1[0, 0] * np.eye(p), rtol=0, atol=0):
        # sigma1 = c I commutes with E: one eigendecomposition serves every t
        c = sigma1[0, 0]
        w, V = np.linalg.eigh(E)

        def project(t):
            return (V * np.maximum(c + t * w, 0.0)) @ V.T
    else:
        def project(t):
            w, V = np.linalg.eigh(sigma1 + t * E)
            return (V * np.maximum(w, 0.0)) @ V.T

    def distance(t):
        return float(np.linalg.norm(sigma1 - project(t)))

    lo, hi = 0.0, float(target_frob)
    for _ in range(60):
        if distance(hi) >= target_frob:
            break
        lo, hi = hi, 2 * hi
    else:
        raise TargetUnreachable(f"cannot reach distance {target_frob} from sigma1")
    t = hi
    for _ in range(max_iters):
        t = (lo + hi) / 2
        d = distance(t)
        if abs(d - target_frob) <= rtol * target_frob:
            break
        if d < target_frob:
            lo = t
        else:
            hi = t
    sigma2 = project(t)
    sigma2 = (sigma2 + sigma2.T) / 2
    if abs(distance(t) - target_frob) > 0.01 * target_frob:
        raise TargetUnreachable(f"projection stalled at distance {distance(t):.4g} for target {target_frob}")
    return sigma2


def gamma_factor(n: float, n_tilde: float, rho: float, beta) -> float:
    """Error-inflation factor ``1 + ||beta||^2 (n / n_tilde + 1 - 2 rho)``."""
    if n <= 0 or n_tilde <= 0:
        raise ValueError("sample sizes must be positive")
    if not 0 <= rho <= 1:
        raise ValueError("rho must lie in [0, 1]")
    b2 = float(np.sum(np.asarray(beta, dtype=float) ** 2))
    return 1.0 + b2 * (n / n_tilde + 1.0 - 2.0 * rho)


def xi_matrix(sigma1_list, sigma2_list, B_star) -> np.ndarray:
    """Shift matrix with column q equal to ``(sigma1_q - sigma2_q) beta_q``."""
    B_star = np.asarray(B_star, dtype=float)
    p, Q = B_star.shape
    if len(sigma1_list) != Q or len(sigma2_list) != Q:
        raise DimensionMismatch(f"need {Q} covariance pairs")
    cols = []
    for q in range(Q):
        s1, s2 = np.asarray(sigma1_list[q]), np.asarray(sigma2_list[q])
        if s1.shape != (p, p) or s2.shape != (p, p):
            raise DimensionMismatch(f"task {q}: covariance shapes {s1.shape}, {s2.shape} vs p={p}")
        cols.append((s1 - s2) @ B_star[:, q])
    return np.column_stack(cols)


@dataclass
class GroundTruth:
    B_star: np.ndarray
    sigma1: List[np.ndarray]
    sigma2: List[np.ndarray]
    gamma: float
    xi: np.ndarray


def make_ground_truth(scenario: ScenarioConfig, rng: np.random.Generator,
                      B_star: Optional[np.ndarray] = None) -> GroundTruth:
    """Coefficients and population covariances for one replication.

    A shifted proxy covariance is drawn once and shared by all tasks.
    """
    p, Q = scenario.p, scenario.Q
    if B_star is None:
        B_star = gen_coef(p, Q, scenario.coef_kind, rng)
    s1 = population_cov(p, scenario.sigma1)
    if scenario.sigma2.kind == "shifted":
        s2 = make_shifted_cov(s1, scenario.sigma2.param, rng)
    else:
        s2 = population_cov(p, scenario.sigma2)
    sigma1, sigma2 = [s1] * Q, [s2] * Q
    gamma = max(gamma_factor(scenario.n, scenario.n_tilde, scenario.rho, B_star[:, q]) for q in range(Q))
    return GroundTruth(B_star, sigma1, sigma2, gamma, xi_matrix(sigma1, sigma2, B_star))


# -- sampling ------------------------------------------------------------------

def _cov_factor(sigma: np.ndarray) -> Optional[np.ndarray]:
    """F with F F^T = sigma, or None for the identity."""
    p = sigma.shape[0]
    if np.array_equal(sigma, np.eye(p)):
        return None
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(sigma)
        return V * np.sqrt(np.maximum(w, 0.0))


def gaussian_rows(rng: np.random.Generator, m: int, sigma: np.ndarray, factor=False) -> np.ndarray:
    Z = rng.standard_normal((m, sigma.shape[0]))
    F = _cov_factor(sigma) if factor is False else factor
    return Z if F is None else Z @ F.T


def gen_task_data(scenario: ScenarioConfig, beta, rng: np.random.Generator,
                  sigma1: Optional[np.ndarray] = None, sigma2: Optional[np.ndarray] = None):
    """Draw ``(X, Y, X_tilde)`` for one task.

    ``X_tilde`` reuses the first ``floor(rho * n_tilde)`` rows of ``X``.
    """
    p = scenario.p
    beta = np.asarray(beta, dtype=float)
    sigma1 = population_cov(p, scenario.sigma1) if sigma1 is None else np.asarray(sigma1)
    sigma2 = population_cov(p, scenario.sigma2) if sigma2 is None else np.asarray(sigma2)
    k = scenario.n_overlap
    if k > 0 and not np.array_equal(sigma1, sigma2):
        raise OverlapWithShift("overlapping rows cannot follow two different covariances")
    X = gaussian_rows(rng, scenario.n, sigma1)
    Y = X @ beta
    if scenario.noise_sd > 0:
        Y = Y + scenario.noise_sd * rng.standard_normal(scenario.n)
    fresh = gaussian_rows(rng, scenario.n_tilde - k, sigma2)
    X_tilde = np.vstack([X[:k], fresh])
    return X, Y, X_tilde


def count_shared_rows(X, X_tilde) -> int:
    rows = {r.tobytes() for r in np.ascontiguousarray(X)}
    return sum(r.tobytes() in rows for r in np.ascontiguousarray(X_tilde))


def summarize(X, Y, X_tilde, overlap_count: Optional[int] = None) -> TaskSummary:
    """Score vector ``X^T Y / n`` and covariance ``Xt^T Xt / nt`` for one task."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    X_tilde = np.asarray(X_tilde, dtype=float)
    if X.ndim != 2 or X_tilde.ndim != 2:
        raise DimensionMismatch("designs must be 2-d")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    if X.shape[1] != X_tilde.shape[1]:
        raise DimensionMismatch(f"X has {X.shape[1]} columns but X_tilde has {X_tilde.shape[1]}")
    n, nt = X.shape[0], X_tilde.shape[0]
    if overlap_count is None:
        overlap_count = count_shared_rows(X, X_tilde)
    return TaskSummary(s=X.T @ Y / n, sigma=X_tilde.T @ X_tilde / nt,
                       n_discovery=n, n_proxy=nt, overlap_count=min(overlap_count, n, nt))


@dataclass
class Replicate:
    """Per-task discovery, proxy and test samples for one replication."""

    X: List[np.ndarray]
    Y: List[np.ndarray]
    X_tilde: List[np.ndarray]
    X_test: List[np.ndarray] = field(default_factory=list)
    Y_test: List[np.ndarray] = field(default_factory=list)
    n_overlap: int = 0

    def proxy_bundle(self) -> TaskBundle:
        return validate_bundle(TaskBundle(tuple(
            summarize(X, Y, Xt, self.n_overlap) for X, Y, Xt in zip(self.X, self.Y, self.X_tilde))))

    def individual_bundle(self) -> TaskBundle:
        return validate_bundle(TaskBundle(tuple(
            summarize(X, Y, X, X.shape[0]) for X, Y in zip(self.X, self.Y))))

    def true_cov_bundle(self, truth: GroundTruth) -> TaskBundle:
        """Proxy covariances replaced by the discovery population covariance."""
        base = self.individual_bundle()
        return validate_bundle(base.with_sigmas(truth.sigma1))


def draw_replicate(scenario: ScenarioConfig, truth: GroundTruth, seed: int, *keys) -> Replicate:
    """Sample every task of one replication from substreams of ``(seed, *keys)``."""
    X, Y, Xt, Xs, Ys = [], [], [], [], []
    f1 = _cov_factor(truth.sigma1[0])
    for q in range(scenario.Q):
        rng = substream(seed, *keys, "task", q)
        x, y, xt = gen_task_data(scenario, truth.B_star[:, q], rng, truth.sigma1[q], truth.sigma2[q])
        X.append(x)
        Y.append(y)
        Xt.append(xt)
        if scenario.n_test > 0:
            trng = substream(seed, *keys, "test", q)
            xs = gaussian_rows(trng, scenario.n_test, truth.sigma1[q], f1)
            Xs.append(xs)
            Ys.append(xs @ truth.B_star[:, q] + scenario.noise_sd * trng.standard_normal(scenario.n_test))
    return Replicate(X, Y, Xt, Xs, Ys, scenario.n_overlap)


def prediction_mse(B_hat, X_test: Sequence[np.ndarray], Y_test: Sequence[np.ndarray]):
    """Per-task test MSE ``||Y - X b_q||^2 / n_test`` and its mean over tasks."""
    B_hat = np.asarray(B_hat, dtype=float)
    if B_hat.ndim == 1:
        B_hat = B_hat[:, None]
    Q = B_hat.shape[1]
    if len(X_test) != Q or len(Y_test) != Q:
        raise DimensionMismatch(f"need test data for {Q} tasks, got {len(X_test)}")
    per_task = np.empty(Q)
    for q in range(Q):
        X, Y = np.asarray(X_test[q], dtype=float), np.asarray(Y_test[q], dtype=float).reshape(-1)
        if X.shape[1] != B_hat.shape[0] or X.shape[0] != Y.shape[0]:
            raise DimensionMismatch(f"task {q}: test shapes {X.shape}, {Y.shape} vs p={B_hat.shape[0]}")
        r = Y - X @ B_hat[:, q]
        per_task[q] = float(r @ r) / X.shape[0]
    return per_task, float(per_task.mean())


def oracle_lambda(scenario: ScenarioConfig, truth: GroundTruth, grid, spec,
                  delta: float = 0.1, draws: int = 500, seed: int = 0):
    """Monte Carlo estimate of the oracle tuning parameter.

    Returns ``(lambda_star, dual_norms)``: the smallest grid value with
    empirical ``P[dual_norm(grad L(B*)) <= lambda / 2] >= 1 - delta`` over
    ``draws`` fresh datasets, and the sampled dual norms. ``lambda_star`` is
    ``inf`` when no grid value qualifies.
    """
    spec = PenaltySpec.parse(spec)
    grid = np.asarray(grid, dtype=float)
    norms = np.empty(draws)
    no_test = replace(scenario, n_test=0)
    for i in range(draws):
        rep = draw_replicate(no_test, truth, seed, "oracle", i)
        norms[i] = dual_norm(gradient(rep.proxy_bundle(), truth.B_star), spec)
    for lam in grid:
        if np.mean(norms <= lam / 2) >= 1 - delta:
            return float(lam), norms
    return math.inf, norms

