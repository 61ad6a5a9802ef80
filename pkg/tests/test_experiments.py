import numpy as np
import pytest

from proxymtl.core import FitConfig, PenaltySpec, TaskBundle, TaskSummary
from proxymtl.experiments import (ExperimentSettings, LazyPath, excess_risk, pool_tasks, rep_means,
                                  ridge_oracle, rows_to_csv, run_experiment, select_descending, summarize_rows)
from proxymtl.solver import fit_path
from proxymtl.tuning import default_grid

from conftest import random_bundle


def test_lazy_path_matches_fit_path(rng):
    b = random_bundle(rng, 6, 3)
    grid = default_grid(b, "sparse", 8, 0.05)
    full = fit_path(b, "sparse", grid)
    lazy = LazyPath(b, PenaltySpec.GROUP_SPARSE, grid, FitConfig())
    assert lazy.get(5) is not None and min(lazy.fits) == 5
    for j in range(8):
        np.testing.assert_array_equal(lazy.get(j).B_hat, full[j].B_hat)


def test_lazy_path_divergence(rng):
    b = random_bundle(rng, 20, 2, rank=4)
    grid = default_grid(b, "sparse", 10, 0.001)
    lazy = LazyPath(b, PenaltySpec.GROUP_SPARSE, grid, FitConfig(tol=1e-7))
    assert lazy.get(0) is None and lazy.diverged_at is not None
    assert lazy.get(lazy.diverged_at + 1) is not None


def test_select_descending_patience(rng):
    b = random_bundle(rng, 5, 2)
    grid = default_grid(b, "sparse", 10)
    path = LazyPath(b, PenaltySpec.GROUP_SPARSE, grid, FitConfig())
    # a criterion with its minimum at index 6 and a worse value at every smaller index
    values = {id(path.get(j).B_hat): abs(j - 6) for j in range(10)}
    path2 = LazyPath(b, PenaltySpec.GROUP_SPARSE, grid, FitConfig())
    path2.fits = dict(path.fits)
    assert select_descending(path2, lambda B: values[id(B)], patience=2) == 6


def test_excess_risk_identity(rng):
    B, C = rng.standard_normal((2, 4, 3))
    assert excess_risk(B, C, [np.eye(4)] * 3) == pytest.approx(np.sum((B - C) ** 2))


def test_pool_tasks_weights():
    a = TaskSummary(np.array([1.0, 0.0]), np.eye(2), 10, 20)
    b = TaskSummary(np.array([0.0, 1.0]), 3 * np.eye(2), 30, 60)
    pooled = pool_tasks(TaskBundle((a, b)))
    np.testing.assert_allclose(pooled.s, [0.25, 0.75])
    np.testing.assert_allclose(pooled.sigma, 2.5 * np.eye(2))
    assert (pooled.n_discovery, pooled.n_proxy) == (40, 80)


def test_ridge_oracle_picks_best_closed_form(rng):
    A = rng.standard_normal((30, 5))
    t = TaskSummary(rng.standard_normal(5), A.T @ A / 30, 30, 30)
    target = rng.standard_normal(5)
    b = ridge_oracle(t, [target], np.eye(5))
    lams = np.geomspace(1e-3, 1e3, 25) * np.mean(np.linalg.eigvalsh(t.sigma))
    cands = [np.linalg.solve(t.sigma + l * np.eye(5), t.s) for l in lams]
    best = min(cands, key=lambda c: np.sum((c - target) ** 2))
    np.testing.assert_allclose(b, best, rtol=1e-10)


def test_settings_from_dict():
    s = ExperimentSettings.from_dict({"grid_size": 5, "fit": {"tol": 1e-5}, "scenario": {"p": 7}}, reps=3)
    assert s.grid_size == 5 and s.fit_config.tol == 1e-5 and s.overrides == {"p": 7} and s.reps == 3
    with pytest.raises(ValueError):
        ExperimentSettings.from_dict({"nope": 1})


def test_unknown_scenario():
    with pytest.raises(KeyError):
        run_experiment("nope", ExperimentSettings())


def test_rows_and_summaries():
    rows = [("s", "sparse", r, v, "proxy", q, float(r + q + v)) for r in range(3) for v in (1, 2) for q in range(2)]
    means = rep_means(rows, "proxy")
    np.testing.assert_allclose(means[1], [1.5, 2.5, 3.5])
    summ = summarize_rows(rows)
    assert [d["sweep_param"] for d in summ] == [1, 2] and summ[0]["reps"] == 3
    text = rows_to_csv(rows)
    assert text.splitlines()[1] == "s,sparse,0,1,proxy,0,1.0"
