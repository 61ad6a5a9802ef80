import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxymtl.core import DimensionMismatch, PenaltySpec, TaskBundle, TaskSummary
from proxymtl.objective import dual_norm, gradient, loss, penalty_norm, spectral_norm
from proxymtl.simgen import CoefKind, CovSpec, ScenarioConfig, draw_replicate, make_ground_truth, substream, xi_matrix

from conftest import random_bundle

SPECS = list(PenaltySpec)


def _fd_gradient(bundle, B, h=1e-5):
    G = np.empty_like(B)
    for idx in np.ndindex(B.shape):
        E = np.zeros_like(B)
        E[idx] = h
        G[idx] = (loss(bundle, B + E) - loss(bundle, B - E)) / (2 * h)
    return G


def test_loss_zero(rng):
    assert loss(random_bundle(rng, 4, 3), np.zeros((4, 3))) == 0.0


def test_loss_scalar():
    b = TaskBundle((TaskSummary(np.array([3.0]), np.array([[2.0]]), 1, 1),))
    assert loss(b, np.array([[1.0]])) == pytest.approx(-2.0, abs=1e-15)


def test_loss_additive(rng):
    one = random_bundle(rng, 4, 1)
    two = TaskBundle(one.tasks * 2)
    b = rng.standard_normal((4, 1))
    assert loss(two, np.hstack([b, b])) == pytest.approx(2 * loss(one, b), rel=1e-14)


def test_loss_dimension_mismatch(rng):
    with pytest.raises(DimensionMismatch):
        loss(random_bundle(rng, 4, 2), np.zeros((3, 2)))


def test_gradient_at_zero(rng):
    b = random_bundle(rng, 5, 3)
    np.testing.assert_array_equal(gradient(b, np.zeros((5, 3))), -b.scores)


def test_gradient_stationary():
    b = TaskBundle((TaskSummary(np.ones(2), np.eye(2), 1, 1),))
    np.testing.assert_array_equal(gradient(b, np.ones((2, 1))), np.zeros((2, 1)))


def test_gradient_matches_finite_differences_5x3(rng):
    b = random_bundle(rng, 5, 3)
    B = rng.standard_normal((5, 3))
    G = gradient(b, B)
    assert np.all(np.abs(G - _fd_gradient(b, B)) <= 1e-6 * (1 + np.abs(G)))


@settings(max_examples=30, deadline=None)
@given(p=st.integers(1, 10), Q=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
def test_gradient_finite_differences_random(p, Q, seed):
    rng = np.random.default_rng(seed)
    b = random_bundle(rng, p, Q)
    B = rng.standard_normal((p, Q))
    G = gradient(b, B)
    assert np.all(np.abs(G - _fd_gradient(b, B)) <= 1e-6 * (1 + np.abs(G)))


def test_loss_matches_square_root_form(rng):
    b = random_bundle(rng, 4, 2)
    B = rng.standard_normal((4, 2))
    ref = 0.0
    for q, t in enumerate(b.tasks):
        w, V = np.linalg.eigh(t.sigma)
        root = V @ np.diag(np.sqrt(np.maximum(w, 0))) @ V.T
        ref += 0.5 * np.sum((root @ B[:, q]) ** 2) - t.s @ B[:, q]
    assert loss(b, B) == pytest.approx(ref, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(0, 1))
def test_loss_convex(seed, t):
    rng = np.random.default_rng(seed)
    b = random_bundle(rng, 5, 3, rank=2)
    B1, B2 = rng.standard_normal((2, 5, 3))
    assert loss(b, t * B1 + (1 - t) * B2) <= t * loss(b, B1) + (1 - t) * loss(b, B2) + 1e-9


@pytest.mark.parametrize("spec", SPECS)
def test_penalty_basics(spec):
    assert penalty_norm(np.zeros((3, 2)), spec) == 0
    assert penalty_norm(np.eye(3), spec) == pytest.approx(3.0)
    assert dual_norm(np.zeros((3, 2)), spec) == 0
    assert dual_norm(np.diag([5.0, 2.0, 1.0]), spec) == pytest.approx(5.0, abs=1e-12)


def test_group_norm_row():
    assert penalty_norm(np.array([[3.0, 4.0], [0.0, 0.0]]), PenaltySpec.GROUP_SPARSE) == 5.0


def test_operator_norm_matches_svd(rng):
    for _ in range(20):
        M = rng.standard_normal((6, 4))
        assert abs(dual_norm(M, PenaltySpec.LOW_RANK) - np.linalg.svd(M, compute_uv=False)[0]) <= 1e-8


def test_spectral_norm_tall_and_wide(rng):
    for shape in [(30, 3), (3, 30), (1, 5), (5, 1)]:
        M = rng.standard_normal(shape)
        assert spectral_norm(M) == pytest.approx(np.linalg.norm(M, 2), rel=1e-10)


def test_spectral_norm_near_degenerate_top():
    # tied leading singular values slow power iteration; the answer must still be right
    M = np.diag([1.0, 1.0 - 1e-9, 0.5])
    assert spectral_norm(M) == pytest.approx(1.0, rel=1e-10)


def test_spectral_norm_ones_start_orthogonal():
    # the fixed start vector is orthogonal to the top singular vector here
    M = np.array([[3.0, -3.0], [0.0, 0.0], [1.0, 1.0]])
    assert spectral_norm(M) == pytest.approx(np.linalg.norm(M, 2), rel=1e-10)


@pytest.mark.parametrize("spec", SPECS)
def test_holder_pairing(rng, spec):
    for _ in range(50):
        X, Y = rng.standard_normal((2, 7, 3))
        assert np.sum(X * Y) <= penalty_norm(X, spec) * dual_norm(Y, spec) + 1e-9


@pytest.mark.parametrize("spec", SPECS)
def test_dual_norm_is_sup_over_unit_ball(rng, spec):
    # the sup is attained: construct the maximizer explicitly
    Y = rng.standard_normal((6, 3))
    if spec is PenaltySpec.GROUP_SPARSE:
        i = np.argmax(np.linalg.norm(Y, axis=1))
        X = np.zeros_like(Y)
        X[i] = Y[i] / np.linalg.norm(Y[i])
    else:
        U, s, Vt = np.linalg.svd(Y)
        X = np.outer(U[:, 0], Vt[0])
    assert penalty_norm(X, spec) == pytest.approx(1.0)
    assert np.sum(X * Y) == pytest.approx(dual_norm(Y, spec), rel=1e-10)


def test_non_finite_norm_input():
    with pytest.raises(ValueError):
        dual_norm(np.array([[np.nan]]), PenaltySpec.LOW_RANK)


@pytest.mark.slow
def test_gradient_mean_matches_shift_matrix():
    # Sigma_1 != Sigma_2 with disjoint samples; Monte Carlo mean of (s - sigma_tilde B*) is Xi
    sc = ScenarioConfig(p=5, Q=2, n=40, n_tilde=60, rho=0.0, coef_kind=CoefKind("sparse", 5),
                        sigma2=CovSpec("shifted", 2.0), n_test=0)
    truth = make_ground_truth(sc, substream(7, "truth"))
    xi = xi_matrix(truth.sigma1, truth.sigma2, truth.B_star)
    assert np.linalg.norm(xi) > 0.5
    reps = 2000
    draws = np.empty((reps, 5, 2))
    for i in range(reps):
        bundle = draw_replicate(sc, truth, 7, "mc", i).proxy_bundle()
        draws[i] = -gradient(bundle, truth.B_star)
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(mean - xi) <= 5 * se)
