"""Summary-statistics data model shared by the estimators.

A task is described only by its score vector ``s = X^T Y / n`` and a
reference covariance ``sigma = Xt^T Xt / nt`` computed from a (possibly
different) proxy sample. A :class:`TaskBundle` is the ordered collection of
tasks handed to the solvers.

Bundles live on disk as a directory holding ``manifest.json`` plus one CSV
file per vector/matrix::

    {"p": 3,
     "tasks": [{"s": "s_0.csv", "sigma": "sigma_0.csv",
                "n_discovery": 100, "n_proxy": 150, "overlap_count": 0}]}
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

PSD_TOL = 1e-8
SYMMETRY_TOL = 1e-10


class ProxyMTLError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(ProxyMTLError, ValueError):
    pass


class NotPSD(ProxyMTLError, ValueError):
    pass


class NonFinite(ProxyMTLError, ValueError):
    pass


class ParseError(ProxyMTLError, ValueError):
    pass


class MissingFile(ProxyMTLError, FileNotFoundError):
    pass


class ConvergenceFailure(ProxyMTLError, RuntimeError):
    pass


class PenaltySpec(enum.Enum):
    """Penalty family; each kind fixes its norm and dual norm.

    ``GROUP_SPARSE`` pairs the l2,1 norm (sum of row norms) with the l2,inf
    dual (largest row norm). ``LOW_RANK`` pairs the nuclear norm with the
    operator norm.
    """

    GROUP_SPARSE = "sparse"
    LOW_RANK = "lowrank"

    @classmethod
    def parse(cls, value: Union[str, "PenaltySpec"]) -> "PenaltySpec":
        if isinstance(value, cls):
            return value
        aliases = {"sparse": cls.GROUP_SPARSE, "groupsparse": cls.GROUP_SPARSE,
                   "group_sparse": cls.GROUP_SPARSE, "l21": cls.GROUP_SPARSE,
                   "lowrank": cls.LOW_RANK, "low_rank": cls.LOW_RANK,
                   "nuclear": cls.LOW_RANK}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown penalty {value!r}; expected 'sparse' or 'lowrank'") from None


AUTO = "auto"


@dataclass(frozen=True)
class FitConfig:
    """Proximal gradient settings.

    ``step_size`` is either a positive float or ``"auto"`` (1/L, with L the
    Lipschitz constant of the loss gradient).
    """

    step_size: Union[float, str] = AUTO
    max_iters: int = 50_000
    tol: float = 1e-8

    def __post_init__(self):
        if self.step_size != AUTO:
            step = float(self.step_size)
            if not (step > 0 and math.isfinite(step)):
                raise ValueError(f"step_size must be positive or 'auto', got {self.step_size!r}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if int(self.max_iters) < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TaskSummary:
    """Summary statistics for one task.

    Attributes
    ----------
    s : (p,) score vector ``X^T Y / n_discovery``.
    sigma : (p, p) reference covariance ``Xt^T Xt / n_proxy``.
    n_discovery, n_proxy : sample sizes behind ``s`` and ``sigma``.
    overlap_count : rows shared by the discovery and proxy samples, if known.
        Diagnostic only; the estimators never read it.
    """

    s: np.ndarray
    sigma: np.ndarray
    n_discovery: int
    n_proxy: int
    overlap_count: Optional[int] = None

    def __post_init__(self):
        s = _frozen(self.s)
        sigma = _frozen(self.sigma)
        if s.ndim == 2 and s.shape[1] == 1:
            s = _frozen(s[:, 0])
        if s.ndim != 1:
            raise DimensionMismatch(f"score vector must be 1-d, got shape {s.shape}")
        if sigma.shape != (s.shape[0], s.shape[0]):
            raise DimensionMismatch(
                f"sigma shape {sigma.shape} does not match score length {s.shape[0]}")
        if int(self.n_discovery) < 1 or int(self.n_proxy) < 1:
            raise ValueError("sample sizes must be positive")
        if self.overlap_count is not None:
            k = int(self.overlap_count)
            if k < 0 or k > min(int(self.n_discovery), int(self.n_proxy)):
                raise ValueError(
                    f"overlap_count {k} must lie in [0, min(n_discovery, n_proxy)]")
            object.__setattr__(self, "overlap_count", k)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "n_discovery", int(self.n_discovery))
        object.__setattr__(self, "n_proxy", int(self.n_proxy))

    @property
    def p(self) -> int:
        return self.s.shape[0]


@dataclass(frozen=True)
class TaskBundle:
    """Q tasks sharing the feature dimension ``p``."""

    tasks: tuple
    p: int = field(default=None)

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("a bundle needs at least one task")
        dims = {t.p for t in tasks}
        if len(dims) != 1:
            raise DimensionMismatch(f"tasks have differing feature dimensions {sorted(dims)}")
        p = dims.pop()
        if self.p is not None and int(self.p) != p:
            raise DimensionMismatch(f"bundle declares p={self.p} but tasks have p={p}")
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "p", p)

    @property
    def Q(self) -> int:
        return len(self.tasks)

    @cached_property
    def scores(self) -> np.ndarray:
        """(p, Q) matrix whose column q is the score vector of task q."""
        return _frozen(np.column_stack([t.s for t in self.tasks]))

    @cached_property
    def sigmas(self) -> np.ndarray:
        """(Q, p, p) stack of reference covariances."""
        return _frozen(np.stack([t.sigma for t in self.tasks]))

    def with_sigmas(self, sigmas: Sequence[np.ndarray]) -> "TaskBundle":
        """Copy of the bundle with the covariance of every task replaced."""
        if len(sigmas) != self.Q:
            raise DimensionMismatch(f"expected {self.Q} covariances, got {len(sigmas)}")
        return TaskBundle(tuple(replace(t, sigma=np.asarray(sig)) for t, sig in zip(self.tasks, sigmas)))


def check_coef(B, bundle: TaskBundle) -> np.ndarray:
    """Return ``B`` as a float (p, Q) array, checking shape and finiteness."""
    B = np.asarray(B, dtype=float)
    if B.ndim == 1 and bundle.Q == 1:
        B = B[:, None]
    if B.shape != (bundle.p, bundle.Q):
        raise DimensionMismatch(f"coefficient matrix has shape {B.shape}, expected {(bundle.p, bundle.Q)}")
    if not np.all(np.isfinite(B)):
        raise NonFinite("coefficient matrix has non-finite entries")
    return B


def _clean_covariance(sigma: np.ndarray, q: int) -> np.ndarray:
    sigma = (sigma + sigma.T) / 2
    w, V = np.linalg.eigh(sigma)
    if w[0] < -PSD_TOL:
        raise NotPSD(f"task {q}: covariance has eigenvalue {w[0]:.3e} < -{PSD_TOL:g}")
    # Clamp only clearly negative eigenvalues so that re-validation is a no-op.
    scale = max(1.0, float(np.abs(w).max()))
    if w[0] < -1e-12 * scale:
        sigma = (V * np.maximum(w, 0.0)) @ V.T
        sigma = (sigma + sigma.T) / 2
    return sigma


def validate_bundle(bundle: TaskBundle) -> TaskBundle:
    """Symmetrize and PSD-clamp every covariance; reject bad input.

    Raises
    ------
    DimensionMismatch
        Tasks disagree on p.
    NonFinite
        Any NaN or infinite entry.
    NotPSD
        A covariance has an eigenvalue below -1e-8.
    """
    if len({t.p for t in bundle.tasks}) != 1:
        raise DimensionMismatch("tasks have differing feature dimensions")
    tasks = []
    for q, t in enumerate(bundle.tasks):
        if not (np.all(np.isfinite(t.s)) and np.all(np.isfinite(t.sigma))):
            raise NonFinite(f"task {q} has non-finite summary statistics")
        tasks.append(replace(t, sigma=_clean_covariance(np.array(t.sigma), q)))
    return TaskBundle(tuple(tasks))


# -- CSV / manifest I/O --------------------------------------------------------

def write_matrix_csv(path, M) -> None:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    with open(path, "w", newline="") as fh:
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_matrix_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"matrix file not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(
                    f"{path}:{lineno}: ragged row with {len(rows[-1])} entries, expected {len(rows[0])}")
    if not rows:
        raise ParseError(f"{path}: empty matrix file")
    return np.array(rows)


def save_bundle(bundle: TaskBundle, dir_path) -> Path:
    """Write ``bundle`` into ``dir_path`` (created if needed); returns the manifest path."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for q, t in enumerate(bundle.tasks):
        s_name, sigma_name = f"s_{q}.csv", f"sigma_{q}.csv"
        write_matrix_csv(d / s_name, t.s)
        write_matrix_csv(d / sigma_name, t.sigma)
        entry = {"s": s_name, "sigma": sigma_name,
                 "n_discovery": t.n_discovery, "n_proxy": t.n_proxy}
        if t.overlap_count is not None:
            entry["overlap_count"] = t.overlap_count
        entries.append(entry)
    manifest = d / "manifest.json"
    manifest.write_text(json.dumps({"p": bundle.p, "tasks": entries}, indent=2, sort_keys=True) + "\n")
    return manifest


def load_bundle(manifest_path) -> TaskBundle:
    """Load a bundle from a manifest file (or the directory containing one).

    The result has already been through :func:`validate_bundle`.
    """
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
        entries = manifest["tasks"]
        declared_p = manifest.get("p")
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"malformed manifest {path}: {exc}") from None
    base = path.parent
    tasks = []
    for q, e in enumerate(entries):
        try:
            s_name, sigma_name = e["s"], e["sigma"]
            n, nt = int(e["n_discovery"]), int(e["n_proxy"])
            overlap = e.get("overlap_count")
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed manifest entry {q} in {path}: {exc}") from None
        s = read_matrix_csv(base / s_name)
        sigma = read_matrix_csv(base / sigma_name)
        if s.shape[1] != 1:
            raise ParseError(f"task {q}: score file must be a single column, got {s.shape[1]} columns")
        tasks.append(TaskSummary(s[:, 0], sigma, n, nt, overlap))
    if not tasks:
        raise ParseError(f"manifest {path} lists no tasks")
    return validate_bundle(TaskBundle(tuple(tasks), p=declared_p))
