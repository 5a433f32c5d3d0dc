import warnings

import pytest
import numpy as np
from scipy.stats import ortho_group

from orthoflow.smallmat import (
    sym_eig, chol_solve, svd, procrustes, SmallMatrixError, frobenius_norm, trace,
)


def _random_spd(n, rng, cond=1e3):
    Q = ortho_group.rvs(n, random_state=rng)
    return Q @ np.diag(np.logspace(0, np.log10(cond), n)) @ Q.T


@pytest.mark.parametrize("n", [1, 3, 15])
def test_sym_eig(n):
    rng = np.random.default_rng(n)
    A = rng.standard_normal((n, n))
    S = A + A.T
    values, vectors = sym_eig(S)
    assert np.all(np.diff(values) >= 0)
    assert np.allclose(vectors.T @ vectors, np.eye(n), atol=1e-12)
    assert np.allclose(S @ vectors, vectors * values, atol=1e-12 * np.abs(S).max())


def test_sym_eig_rejects_asymmetric():
    S = np.array([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(SmallMatrixError):
        sym_eig(S)
    with pytest.raises(SmallMatrixError):
        sym_eig(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_chol_solve():
    rng = np.random.default_rng(0)
    M = _random_spd(6, rng)
    B = rng.standard_normal((6, 2))
    X = chol_solve(M, B)
    assert np.allclose(M @ X, B, atol=1e-10)
    with pytest.raises(SmallMatrixError):
        chol_solve(np.diag([1.0, -1.0]), np.eye(2))


def test_svd_and_norms():
    rng = np.random.default_rng(1)
    S = rng.standard_normal((5, 5))
    left, sigma, right = svd(S)
    assert np.all(np.diff(sigma) <= 0)
    assert np.allclose(left @ np.diag(sigma) @ right.T, S)
    assert np.isclose(frobenius_norm(S), np.sqrt(np.sum(sigma**2)))
    assert np.isclose(trace(S), np.sum(np.diag(S)))


def test_procrustes_recovers_rotation():
    rng = np.random.default_rng(2)
    Q = ortho_group.rvs(4, random_state=rng)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.allclose(procrustes(Q), Q, atol=1e-12)
    # optimal for a symmetric positive definite cross matrix is the identity
    assert np.allclose(procrustes(_random_spd(4, rng)), np.eye(4), atol=1e-10)


def test_procrustes_rank_deficient_warns():
    with pytest.warns(UserWarning, match="Rank-deficient"):
        Q = procrustes(np.diag([1.0, 0.0]))
    assert np.allclose(Q.T @ Q, np.eye(2))


def _orthogonal_2x2(theta):
    c, s = np.cos(theta), np.sin(theta)
    rotations = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    reflections = np.stack([np.stack([c, s], -1), np.stack([s, -c], -1)], -2)
    return np.concatenate([rotations, reflections])


@pytest.mark.parametrize("seed", range(5))
def test_procrustes_maximises_trace(seed):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((2, 2))
    Q = procrustes(S)
    assert np.allclose(Q.T @ Q, np.eye(2), atol=1e-14)
    # exhaustive search over O(2): rotations and reflections
    candidates = _orthogonal_2x2(np.linspace(0, 2 * np.pi, 20001))
    objectives = np.einsum("kij,ij->k", candidates, S)
    best = trace(Q.T @ S)
    assert best >= objectives.max() - 1e-12
    assert best - objectives.max() < 1e-6
    assert np.isclose(best, np.sum(svd(S)[1]))


@pytest.mark.parametrize("n", [2, 5])
def test_procrustes_right_equivariance(n):
    rng = np.random.default_rng(n)
    S = rng.standard_normal((n, n))
    R = ortho_group.rvs(n, random_state=rng)
    assert np.allclose(procrustes(S @ R), procrustes(S) @ R, atol=1e-10)
    assert np.allclose(procrustes(R @ S), R @ procrustes(S), atol=1e-10)
