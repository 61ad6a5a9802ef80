import numpy as np
import pytest

from proxymtl.core import TaskBundle, TaskSummary, validate_bundle


def random_bundle(rng, p, Q, rank=None, n=50):
    """Bundle with random scores and Wishart-like covariances.

    Without ``rank`` each covariance averages 3p Gaussian rows, so it is full
    rank and reasonably conditioned.
    """
    tasks = []
    for _ in range(Q):
        k = 3 * p if rank is None else rank
        A = rng.standard_normal((max(k, 1), p))
        sigma = A.T @ A / max(k, 1) if k > 0 else np.zeros((p, p))
        tasks.append(TaskSummary(rng.standard_normal(p), sigma, n, n))
    return validate_bundle(TaskBundle(tuple(tasks)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
