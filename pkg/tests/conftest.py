import numpy as np
import pytest

from sparsesense.linmodel import GaussianPair


def random_spd(rng, m, ridge=0.1):
    x = rng.standard_normal((m, 2 * m))
    return x @ x.T / (2 * m) + ridge * np.eye(m)


def mean_pair(rng, m, prior0=0.5):
    return GaussianPair.mean_shift(rng.standard_normal(m), random_spd(rng, m), prior0)


def cov_pair(rng, m):
    return GaussianPair.covariance_shift(random_spd(rng, m), random_spd(rng, m))


def dense_bordered_logdet(sigma, a, theta, A):
    """log det of [[S^-1 + diag(1_A)/a, S^-1 t], [t' S^-1, t' S^-1 t]] by explicit inversion."""
    m = sigma.shape[0]
    s_inv = np.linalg.inv(sigma - a * np.eye(m))
    mat = np.zeros((m + 1, m + 1))
    mat[:m, :m] = s_inv
    mat[list(A), list(A)] += 1.0 / a
    b = s_inv @ theta
    mat[:m, m] = b
    mat[m, :m] = b
    mat[m, m] = theta @ b
    sign, ld = np.linalg.slogdet(mat)
    assert sign > 0
    return ld


def counterexample_sigma(rho):
    c = 1 - rho**2
    return np.array([[1, -rho, 0], [-rho, 1, 0], [0, 0, c]]) / c


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
