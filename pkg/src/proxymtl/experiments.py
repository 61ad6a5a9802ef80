"""Simulation scenarios comparing proxy-covariance estimators.

Every scenario produces long-format rows
``(scenario, penalty, rep, sweep_param, estimator, task, mse)`` where ``mse``
is the test-set prediction MSE of one task. Estimator labels:

``proxy``          covariance from the proxy sample (the estimator of interest)
``individual``     covariance from the discovery sample itself
``true_cov``       population covariance of the discovery features
``pooled_single``  one single-task fit on all tasks' statistics averaged
``split_single``   an independent single-task fit per task
``holdout``        proxy estimator tuned on a hold-out sample
``adaptive``       proxy estimator on pooled hold-out data, tuned by the Lepski rule

Unless a scenario is about tuning, each estimator takes the lambda on its
grid with the smallest population excess risk (known in simulation), so
that comparisons reflect the estimators rather than the tuning rule.
Replications reuse the discovery/test draws across sweep values, which keeps
the comparisons paired.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .core import FitConfig, PenaltySpec, TaskBundle, TaskSummary, validate_bundle
from .objective import dual_norm, gradient
from .simgen import (CoefKind, CovSpec, GroundTruth, ScenarioConfig, draw_replicate,
                     gaussian_rows, make_ground_truth, oracle_lambda, prediction_mse, substream, summarize)
from .solver import Divergence, FitResult, fit, lipschitz_bound
from .tuning import default_grid, lepski_scan

log = logging.getLogger(__name__)

COLUMNS = ("scenario", "penalty", "rep", "sweep_param", "estimator", "task", "mse")
SCENARIOS = ("tau-sweep", "rho-sweep", "misspec-sweep", "tuning-compare", "single-vs-multi")


@dataclass
class ExperimentSettings:
    """Knobs shared by every scenario; ``overrides`` patch the scenario's base config."""

    penalty: PenaltySpec = PenaltySpec.GROUP_SPARSE
    reps: int = 20
    seed: int = 0
    grid_size: int = 20
    grid_min_ratio: float = 0.01
    cbar: float = 1.0
    patience: int = 2
    fit_config: FitConfig = field(default_factory=lambda: FitConfig(tol=1e-6, max_iters=3000))
    sweep: Optional[List[float]] = None
    overrides: Dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, **kwargs) -> "ExperimentSettings":
        """Build settings from a config JSON dictionary (see README for the schema)."""
        d = dict(d)
        fc = d.pop("fit", None)
        known = {k: d.pop(k) for k in list(d) if k in ("grid_size", "grid_min_ratio", "cbar",
                                                        "patience", "sweep")}
        s = cls(**kwargs, **known)
        if fc:
            s.fit_config = FitConfig(**fc)
        s.overrides = d.pop("scenario", {})
        if d:
            raise ValueError(f"unknown config keys: {sorted(d)}")
        return s


# -- lambda selection helpers ---------------------------------------------------

class LazyPath:
    """Warm-started fits down an ascending grid, computed on demand from the top."""

    def __init__(self, bundle: TaskBundle, spec: PenaltySpec, grid, config: FitConfig):
        self.bundle, self.spec, self.grid, self.config = bundle, spec, np.asarray(grid), config
        self.fits: Dict[int, FitResult] = {}
        self.diverged_at: Optional[int] = None
        self._L = lipschitz_bound(bundle)

    def get(self, j: int) -> Optional[FitResult]:
        """Fit at index j, or None if some fit at or above j diverged."""
        if self.diverged_at is not None and j <= self.diverged_at:
            return None
        lowest = min(self.fits, default=self.grid.size)
        for i in range(lowest - 1, j - 1, -1):
            init = self.fits[i + 1].B_hat if i + 1 in self.fits else None
            try:
                self.fits[i] = fit(self.bundle, self.spec, self.grid[i], self.config,
                                   init=init, lipschitz=self._L)
            except Divergence:
                self.diverged_at = i
                return None
        return self.fits[j]


def select_descending(path: LazyPath, criterion: Callable[[np.ndarray], float],
                      patience: int = 2) -> int:
    """Index minimizing ``criterion(B_hat)`` scanning down the grid.

    The scan stops at a divergent fit or once the criterion has failed to
    improve on its best value for ``patience`` consecutive grid points.
    Ties go to the larger lambda.
    """
    best_j, best_val, worse = None, math.inf, 0
    for j in range(path.grid.size - 1, -1, -1):
        res = path.get(j)
        if res is None:
            break
        val = criterion(res.B_hat)
        if val < best_val:
            best_j, best_val, worse = j, val, 0
        else:
            worse += 1
            if worse >= patience:
                break
    return path.grid.size - 1 if best_j is None else best_j


def excess_risk(B, B_star, sigma1: Sequence[np.ndarray]) -> float:
    """``sum_q (b_q - beta_q)^T sigma1_q (b_q - beta_q)``."""
    D = np.asarray(B) - B_star
    return float(sum(D[:, q] @ sigma1[q] @ D[:, q] for q in range(D.shape[1])))


def oracle_fit(bundle: TaskBundle, spec, truth_B, sigma1, settings: ExperimentSettings,
               grid=None) -> np.ndarray:
    """Solution on the default grid with the smallest excess risk."""
    spec = PenaltySpec.parse(spec)
    if grid is None:
        grid = default_grid(bundle, spec, settings.grid_size, settings.grid_min_ratio)
    path = LazyPath(bundle, spec, grid, settings.fit_config)
    j = select_descending(path, lambda B: excess_risk(B, truth_B, sigma1), settings.patience)
    return path.get(j).B_hat


def ridge_oracle(task: TaskSummary, targets: Sequence[np.ndarray], sigma1: np.ndarray,
                 size: int = 25) -> np.ndarray:
    """Summary-statistics ridge ``(sigma + lam I)^{-1} s`` with lambda picked by excess risk.

    ``targets`` are the coefficient vectors the single fit is scored against
    (one for a split fit, all tasks for a pooled fit).
    """
    w, V = np.linalg.eigh(task.sigma)
    Vs = V.T @ task.s
    scale = max(float(np.mean(w)), 1e-12)
    best, best_risk = None, math.inf
    for lam in np.geomspace(1e-3, 1e3, size) * scale:
        b = V @ (Vs / (np.maximum(w, 0.0) + lam))
        risk = sum(float((b - t) @ sigma1 @ (b - t)) for t in targets)
        if risk < best_risk:
            best, best_risk = b, risk
    return best


def pool_tasks(bundle: TaskBundle) -> TaskSummary:
    """Sample-size weighted average of all tasks' statistics, as one task."""
    n = np.array([t.n_discovery for t in bundle.tasks], dtype=float)
    nt = np.array([t.n_proxy for t in bundle.tasks], dtype=float)
    s = sum(w * t.s for w, t in zip(n, bundle.tasks)) / n.sum()
    sigma = sum(w * t.sigma for w, t in zip(nt, bundle.tasks)) / nt.sum()
    return TaskSummary(s, sigma, int(n.sum()), int(nt.sum()))


# -- scenario runners ----------------------------------------------------------

def _base(name: str, spec: PenaltySpec, overrides: dict) -> ScenarioConfig:
    coef = CoefKind("sparse", 10) if spec is PenaltySpec.GROUP_SPARSE else CoefKind("lowrank", 2)
    base = dict(p=100, Q=8, n=100, n_tilde=150, rho=0.0, coef_kind=coef, noise_sd=1.0, n_test=500)
    base.update(overrides)
    if name == "rho-sweep" and "n_tilde" not in overrides:
        base["n_tilde"] = base["n"]
    return ScenarioConfig(**base)


DEFAULT_SWEEPS = {
    "tau-sweep": [0.5, 1, 2, 5, 10],
    "rho-sweep": [0.0, 0.25, 0.5, 0.75, 1.0],
    "misspec-sweep": [10, 20, 50, 100],
    "tuning-compare": [10, 20, 50, 100],
    "single-vs-multi": [2, 4, 8],
}


def _emit(rows, scenario, spec, rep, value, estimator, per_task):
    for q, m in enumerate(per_task):
        rows.append((scenario, spec.value, rep, value, estimator, q, float(m)))


def _truth(sc: ScenarioConfig, seed: int, name: str, *keys) -> GroundTruth:
    return make_ground_truth(sc, substream(seed, name, "truth", *keys))


def _sweep_rep(name: str, base: ScenarioConfig, values, spec, settings, rep: int) -> list:
    """One replication of tau-, rho- or misspec-sweep."""
    rows = []
    seed = settings.seed
    truth0 = _truth(base, seed, name, rep)
    cached = {}
    for v in values:
        if name == "tau-sweep":
            sc = replace(base, n_tilde=int(round(v * base.n)))
        elif name == "rho-sweep":
            sc = replace(base, rho=float(v))
        else:
            sc = replace(base, sigma2=CovSpec("shifted", float(v)))
        if name == "misspec-sweep":
            truth = make_ground_truth(sc, substream(seed, name, "shift", rep, repr(v)), B_star=truth0.B_star)
        else:
            truth = truth0
        data = draw_replicate(sc, truth, seed, name, "rep", rep)
        proxy_B = oracle_fit(data.proxy_bundle(), spec, truth.B_star, truth.sigma1, settings)
        _emit(rows, name, spec, rep, v, "proxy", prediction_mse(proxy_B, data.X_test, data.Y_test)[0])
        # discovery and test draws do not depend on the sweep value
        if not cached:
            ind_B = oracle_fit(data.individual_bundle(), spec, truth.B_star, truth.sigma1, settings)
            tc_B = oracle_fit(data.true_cov_bundle(truth), spec, truth.B_star, truth.sigma1, settings)
            cached["individual"] = prediction_mse(ind_B, data.X_test, data.Y_test)[0]
            cached["true_cov"] = prediction_mse(tc_B, data.X_test, data.Y_test)[0]
        for est in ("individual", "true_cov"):
            _emit(rows, name, spec, rep, v, est, cached[est])
    return rows


def _single_vs_multi_rep(name, base, values, spec, settings, rep) -> list:
    rows = []
    for Q in values:
        Q = int(Q)
        sc = replace(base, Q=Q, coef_kind=replace(base.coef_kind, size=min(base.coef_kind.size, Q))
                     if base.coef_kind.kind == "lowrank" else base.coef_kind)
        truth = _truth(sc, settings.seed, name, rep, Q)
        data = draw_replicate(sc, truth, settings.seed, name, "rep", rep, Q)
        bundle = data.proxy_bundle()
        B = oracle_fit(bundle, spec, truth.B_star, truth.sigma1, settings)
        _emit(rows, name, spec, rep, Q, "proxy", prediction_mse(B, data.X_test, data.Y_test)[0])

        pooled = validate_bundle(TaskBundle((pool_tasks(bundle),)))
        betas = [truth.B_star[:, q] for q in range(Q)]
        if spec is PenaltySpec.GROUP_SPARSE:
            # l2,1 with a single column is the lasso penalty
            b = _pooled_lasso(pooled, betas, truth, settings)
        else:
            b = ridge_oracle(pooled.tasks[0], betas, truth.sigma1[0])
        B_pool = np.tile(b[:, None], (1, Q))
        _emit(rows, name, spec, rep, Q, "pooled_single", prediction_mse(B_pool, data.X_test, data.Y_test)[0])

        B_split = np.empty_like(B_pool)
        for q, task in enumerate(bundle.tasks):
            if spec is PenaltySpec.GROUP_SPARSE:
                single = TaskBundle((task,))
                B_split[:, q] = oracle_fit(single, spec, truth.B_star[:, [q]], [truth.sigma1[q]], settings)[:, 0]
            else:
                B_split[:, q] = ridge_oracle(task, [betas[q]], truth.sigma1[q])
        _emit(rows, name, spec, rep, Q, "split_single", prediction_mse(B_split, data.X_test, data.Y_test)[0])
    return rows


def _pooled_lasso(pooled: TaskBundle, betas, truth: GroundTruth, settings) -> np.ndarray:
    grid = default_grid(pooled, PenaltySpec.GROUP_SPARSE, settings.grid_size, settings.grid_min_ratio)
    path = LazyPath(pooled, PenaltySpec.GROUP_SPARSE, grid, settings.fit_config)
    s1 = truth.sigma1[0]

    def risk(B):
        b = B[:, 0]
        return sum(float((b - t) @ s1 @ (b - t)) for t in betas)

    return path.get(select_descending(path, risk, settings.patience)).B_hat[:, 0]


def _tuning_rep(name, base, values, spec, settings, rep) -> list:
    rows = []
    seed = settings.seed
    truth = _truth(base, seed, name, rep)
    data = draw_replicate(base, truth, seed, name, "rep", rep)
    h_max = int(max(values))
    X_h, Y_h = [], []
    for q in range(base.Q):
        rng = substream(seed, name, "holdout", rep, q)
        x = gaussian_rows(rng, h_max, truth.sigma1[q])
        X_h.append(x)
        Y_h.append(x @ truth.B_star[:, q] + base.noise_sd * rng.standard_normal(h_max))

    bundle = data.proxy_bundle()
    grid = default_grid(bundle, spec, settings.grid_size, settings.grid_min_ratio)
    path = LazyPath(bundle, spec, grid, settings.fit_config)
    for h in values:
        h = int(h)
        Xs, Ys = [x[:h] for x in X_h], [y[:h] for y in Y_h]

        def holdout_err(B):
            return sum(float(np.sum((Ys[q] - Xs[q] @ B[:, q]) ** 2)) for q in range(base.Q))

        j = select_descending(path, holdout_err, settings.patience)
        _emit(rows, name, spec, rep, h, "holdout",
              prediction_mse(path.get(j).B_hat, data.X_test, data.Y_test)[0])

        pooled = validate_bundle(TaskBundle(tuple(
            summarize(np.vstack([X, xs]), np.concatenate([Y, ys]), np.vstack([Xt, xs]), h)
            for X, Y, Xt, xs, ys in zip(data.X, data.Y, data.X_tilde, Xs, Ys))))
        pgrid = default_grid(pooled, spec, settings.grid_size, settings.grid_min_ratio)
        jj, fits = lepski_scan(pooled, spec, pgrid, settings.cbar, settings.fit_config)
        _emit(rows, name, spec, rep, h, "adaptive",
              prediction_mse(fits[jj].B_hat, data.X_test, data.Y_test)[0])
    return rows


_RUNNERS = {
    "tau-sweep": _sweep_rep,
    "rho-sweep": _sweep_rep,
    "misspec-sweep": _sweep_rep,
    "tuning-compare": _tuning_rep,
    "single-vs-multi": _single_vs_multi_rep,
}


def run_experiment(name: str, settings: ExperimentSettings, reps: Optional[Iterable[int]] = None) -> list:
    """Rows for scenario ``name``; deterministic given ``settings.seed``."""
    if name not in _RUNNERS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    spec = PenaltySpec.parse(settings.penalty)
    base = _base(name, spec, settings.overrides)
    values = list(settings.sweep or DEFAULT_SWEEPS[name])
    rows = []
    for rep in (range(settings.reps) if reps is None else reps):
        log.info("%s/%s rep %d", name, spec.value, rep)
        rows.extend(_RUNNERS[name](name, base, values, spec, settings, rep))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([r[0], r[1], r[2], repr(r[3]), r[4], r[5], repr(r[6])])
    return buf.getvalue()


def rep_means(rows, estimator: str) -> Dict[object, np.ndarray]:
    """Per-replication task-averaged MSE for ``estimator``, keyed by sweep value."""
    acc: Dict[object, Dict[int, List[float]]] = {}
    for _, _, rep, v, est, _, mse in rows:
        if est == estimator:
            acc.setdefault(v, {}).setdefault(rep, []).append(mse)
    return {v: np.array([np.mean(reps[r]) for r in sorted(reps)]) for v, reps in acc.items()}


def summarize_rows(rows) -> List[dict]:
    """Mean and standard error of the task-averaged MSE per (sweep value, estimator)."""
    out = []
    estimators = sorted({r[4] for r in rows})
    for est in estimators:
        for v, m in sorted(rep_means(rows, est).items(), key=lambda kv: float(kv[0])):
            se = float(m.std(ddof=1) / np.sqrt(m.size)) if m.size > 1 else float("nan")
            out.append({"sweep_param": v, "estimator": est, "mean_mse": float(m.mean()), "se": se, "reps": m.size})
    return out


# -- Lepski guarantees at desk scale ----------------------------------------------

@dataclass
class LepskiCheck:
    lambda_star: float
    grid: np.ndarray
    chosen: np.ndarray          # lambda-hat per replication
    event: np.ndarray           # oracle event A(lambda_star) per replication
    dual_error: np.ndarray      # dual_norm(grad L(B_hat) - grad L(B*)) per replication
    cbar: float

    @property
    def bound(self) -> float:
        return (2 * self.cbar + 1.5) * self.lambda_star


def lepski_oracle_check(spec="sparse", reps: int = 100, draws: int = 500, cbar: float = 1.0,
                        seed: int = 0, delta: float = 0.1, grid_size: int = 15,
                        scenario: Optional[ScenarioConfig] = None,
                        config: FitConfig = FitConfig(tol=1e-8, max_iters=20000)) -> LepskiCheck:
    """Compare the Lepski choice with the Monte Carlo oracle tuning parameter.

    ``B*`` and the population covariances stay fixed; ``draws`` fresh datasets
    estimate the oracle lambda on a fixed log-spaced grid, then ``reps`` new
    datasets are tuned by :func:`~proxymtl.tuning.lepski_scan`.
    """
    spec = PenaltySpec.parse(spec)
    if scenario is None:
        coef = CoefKind("sparse", 4) if spec is PenaltySpec.GROUP_SPARSE else CoefKind("lowrank", 2)
        scenario = ScenarioConfig(p=20, Q=4, n=200, n_tilde=200, rho=0.0, coef_kind=coef, n_test=0)
    truth = make_ground_truth(scenario, substream(seed, "lepski", "truth"))
    # grid spans the sampled range of 2 * dual_norm(grad L(B*)); fixed before any tuning
    _, pilot = oracle_lambda(scenario, truth, [np.inf], spec, delta, draws, seed)
    grid = np.geomspace(0.5 * 2 * np.quantile(pilot, 0.05), 2 * 2 * pilot.max(), grid_size)
    lam_star, _ = oracle_lambda(scenario, truth, grid, spec, delta, draws, seed)
    chosen, event, err = [], [], []
    for r in range(reps):
        data = draw_replicate(scenario, truth, seed, "lepski", "rep", r)
        bundle = data.proxy_bundle()
        g_star = gradient(bundle, truth.B_star)
        j, fits = lepski_scan(bundle, spec, grid, cbar, config)
        chosen.append(grid[j])
        event.append(dual_norm(g_star, spec) <= lam_star / 2)
        err.append(dual_norm(gradient(bundle, fits[j].B_hat) - g_star, spec))
    return LepskiCheck(lam_star, grid, np.array(chosen), np.array(event), np.array(err), cbar)
