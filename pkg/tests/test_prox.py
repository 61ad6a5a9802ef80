import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxymtl.core import PenaltySpec
from proxymtl.objective import dual_norm, penalty_norm
from proxymtl.prox import NegativeThreshold, group_soft_threshold, prox, svt, thin_svd

SPECS = list(PenaltySpec)


def test_group_zero_threshold(rng):
    M = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(group_soft_threshold(M, 0.0), M)


def test_group_row_killed_at_norm():
    np.testing.assert_array_equal(group_soft_threshold(np.array([[3.0, 4.0]]), 5.0), [[0.0, 0.0]])


def test_group_row_shrunk():
    np.testing.assert_allclose(group_soft_threshold(np.array([[3.0, 4.0]]), 1.0), [[2.4, 3.2]], atol=1e-15)


def test_group_row_shrunk_grid_oracle():
    # minimize 1/2 ||x - (3, 4)||^2 + ||x|| on a fine grid
    g = np.arange(1.5, 4.0, 1e-3)
    X, Y = np.meshgrid(g, g, indexing="ij")
    f = 0.5 * ((X - 3) ** 2 + (Y - 4) ** 2) + np.hypot(X, Y)
    i, j = np.unravel_index(np.argmin(f), f.shape)
    assert abs(X[i, j] - 2.4) <= 1e-3 and abs(Y[i, j] - 3.2) <= 1e-3


def test_zero_row_stays_zero():
    out = group_soft_threshold(np.zeros((2, 3)), 0.0)
    assert np.all(out == 0) and not np.any(np.isnan(out))


def test_negative_threshold():
    for op in (group_soft_threshold, svt):
        with pytest.raises(NegativeThreshold):
            op(np.eye(2), -0.1)


def test_svt_zero_threshold(rng):
    M = rng.standard_normal((6, 4))
    np.testing.assert_allclose(svt(M, 0.0), M, rtol=0, atol=1e-10)


def test_svt_diagonal():
    np.testing.assert_allclose(svt(np.diag([5.0, 2.0, 1.0]), 2.0), np.diag([3.0, 0.0, 0.0]), atol=1e-12)


def test_svt_kills_everything_above_operator_norm(rng):
    M = rng.standard_normal((5, 3))
    assert np.all(svt(M, dual_norm(M, PenaltySpec.LOW_RANK)) == 0)


def test_svt_spectrum(rng):
    for _ in range(50):
        M = rng.standard_normal((8, 4))
        t = rng.uniform(0, 3)
        _, s, _ = thin_svd(M)
        _, s_out, _ = thin_svd(svt(M, t))
        np.testing.assert_allclose(s_out, np.maximum(s - t, 0.0), rtol=0, atol=1e-8)


def test_thin_svd_examples(rng):
    np.testing.assert_allclose(thin_svd(np.eye(3))[1], [1, 1, 1])
    u, v = rng.standard_normal(5), rng.standard_normal(3)
    u, v = 2 * u / np.linalg.norm(u), 3 * v / np.linalg.norm(v)
    s = thin_svd(np.outer(u, v))[1]
    assert s[0] == pytest.approx(6.0) and np.all(np.abs(s[1:]) <= 1e-12)


@pytest.mark.parametrize("shape", [(8, 3), (3, 8)])
def test_thin_svd_postconditions(rng, shape):
    M = rng.standard_normal(shape)
    U, s, V = thin_svd(M)
    k = min(shape)
    assert U.shape == (shape[0], k) and V.shape == (shape[1], k)
    np.testing.assert_allclose((U * s) @ V.T, M, atol=1e-12)
    np.testing.assert_allclose(U.T @ U, np.eye(k), atol=1e-12)
    np.testing.assert_allclose(V.T @ V, np.eye(k), atol=1e-12)
    assert np.all(np.diff(s) <= 0)


def _lattice_argmin(M, t, spec, h=1e-3):
    # brute-force minimization of 1/2 ||Z - M||^2 + t P(Z) over the lattice h * Z^4,
    # refined coarse to fine inside the box of half-width 2 max|M|
    half = 2 * np.abs(M).max()
    centre = np.zeros(4)
    for step, radius in ((0.1, int(np.ceil(half / 0.1))), (0.01, 15), (h, 15)):
        axes = [step * np.arange(np.round(c / step) - radius, np.round(c / step) + radius + 1) for c in centre]
        Z = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2, 2)
        f = 0.5 * np.sum((Z - M) ** 2, axis=(1, 2))
        if spec is PenaltySpec.GROUP_SPARSE:
            f += t * np.linalg.norm(Z, axis=2).sum(axis=1)
        else:
            f += t * np.linalg.svd(Z, compute_uv=False).sum(axis=1)
        centre = Z[np.argmin(f)].ravel()
    return centre.reshape(2, 2)


@pytest.mark.parametrize("spec", SPECS)
def test_prox_against_lattice_search(spec):
    # the prox value beats the best lattice point, and by 1-strong convexity of the
    # prox objective the two are within sqrt(2 * objective gap) of each other
    rng = np.random.default_rng(3)
    for _ in range(3):
        M = rng.uniform(-1, 1, (2, 2))
        t = rng.uniform(0.1, 0.6)
        f = lambda W: 0.5 * np.sum((W - M) ** 2) + t * penalty_norm(W, spec)
        Z, G = prox(M, t, spec), _lattice_argmin(M, t, spec)
        assert f(Z) <= f(G) + 1e-12
        assert np.sum((Z - G) ** 2) <= 2 * (f(G) - f(Z)) + 1e-12
        assert np.abs(Z - G).max() <= 5e-3


@pytest.mark.parametrize("spec", SPECS)
def test_prox_optimality_against_perturbations(rng, spec):
    # the prox value beats every random nearby point
    for _ in range(20):
        M = rng.standard_normal((4, 3))
        t = rng.uniform(0, 2)
        Z = prox(M, t, spec)
        f = lambda W: 0.5 * np.sum((W - M) ** 2) + t * penalty_norm(W, spec)
        base = f(Z)
        for _ in range(20):
            assert f(Z + 1e-3 * rng.standard_normal(Z.shape)) >= base - 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(0, 3), spec=st.sampled_from(SPECS))
def test_nonexpansive(seed, t, spec):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((2, 6, 3))
    assert np.linalg.norm(prox(X, t, spec) - prox(Y, t, spec)) <= np.linalg.norm(X - Y) + 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(0, 3))
def test_row_norms_never_grow(seed, t):
    M = np.random.default_rng(seed).standard_normal((6, 3))
    out = group_soft_threshold(M, t)
    assert np.all(np.linalg.norm(out, axis=1) <= np.linalg.norm(M, axis=1) + 1e-15)
