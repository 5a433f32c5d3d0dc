"""
Tests for the discrete Hamiltonian, inner products and the Green's solver.
"""

import pytest
import numpy as np

from problem_generator import Oscillator, Particle_in_box

from orthoflow import operator as hamiltonian
from orthoflow.grid import Box, build_grid, harmonic, coulomb
from orthoflow.operator import (
    assemble, OrbitalSet, GreenSolver, apply_green, inner_l2, inner_a, energy,
    modified_gram_schmidt, green_cross_matrix, NotPositiveDefiniteError,
    SolverConvergenceError,
)
from orthoflow.flow import random_orthonormal_init


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_assembly_symmetric(dim):
    H = Oscillator(dim=dim, half_width=3.0, cells=6).get_operator()
    assert H.n_g == 5**dim
    assert H.asymmetry() == 0
    # 2d + 1 entries per interior row
    assert np.max(np.diff(H.matrix.indptr)) == 2 * dim + 1


@pytest.mark.parametrize("dim", [1, 2])
def test_box_spectrum(dim):
    problem = Particle_in_box(dim=dim, cells=10, c_lap=0.7, shift=0.3)
    H = problem.get_operator()
    values = np.linalg.eigvalsh(H.matrix.toarray())
    assert np.allclose(values[:6], problem.discrete_eigenvalues(6), rtol=1e-10)


def test_inner_products(box_2d):
    H, _ = box_2d
    U = random_orthonormal_init(H.grid, 4, seed=1)
    G = inner_l2(U, U)
    assert np.allclose(G, np.eye(4), atol=1e-12)
    A = inner_a(U, U, H)
    assert np.allclose(A, A.T, atol=1e-10 * np.abs(A).max())
    assert np.isclose(energy(U, H), 0.5 * np.trace(A))
    assert np.all(np.linalg.eigvalsh(A) > 0)


def test_energy_shift_correction():
    H = Particle_in_box(dim=1, cells=20, shift=2.0).get_operator()
    U = random_orthonormal_init(H.grid, 3, seed=2)
    assert np.isclose(energy(U, H) - energy(U, H, shift_corrected=True), 3.0)


def test_mixed_grids_rejected():
    H = Particle_in_box(dim=1, cells=20).get_operator()
    other = build_grid(Box([0.0], [2.0]), 20)
    U = random_orthonormal_init(H.grid, 2, seed=0)
    V = random_orthonormal_init(other, 2, seed=0)
    with pytest.raises(ValueError):
        inner_l2(U, V)
    with pytest.raises(ValueError):
        OrbitalSet(np.zeros((7, 2)), H.grid)


def test_modified_gram_schmidt_counter():
    grid = build_grid(Box([0.0], [1.0]), 30)
    rng = np.random.default_rng(3)
    X = rng.standard_normal((grid.n_g, 5))
    X[:, 3] = X[:, 0] + 2 * X[:, 1]
    calls = hamiltonian.orthonormalization_calls
    Q, dependent = modified_gram_schmidt(X.copy(), grid.mass_weight)
    assert hamiltonian.orthonormalization_calls == calls + 1
    assert dependent == [3]
    keep = [0, 1, 2, 4]
    U = OrbitalSet(Q[:, keep], grid)
    assert U.ortho_error() < 1e-13


@pytest.mark.parametrize("backend", ["direct", "cg"])
def test_green_solves(backend, oscillator_1d):
    H, _ = oscillator_1d
    solver = GreenSolver(H, backend=backend, verbose=1)
    U = random_orthonormal_init(H.grid, 3, seed=4)
    W = apply_green(H, solver, U)
    residual = np.linalg.norm(H.apply(W) - U.data) / np.linalg.norm(U.data)
    assert residual < 1e-10
    assert solver.n_solves == 3
    w = solver.solve(U.column(0))
    assert w.shape == (H.n_g,)
    S, asym = green_cross_matrix(W.data, U.data, H.mass_weight)
    assert np.allclose(S, S.T)
    assert asym < 1e-10
    # G is positive definite
    assert np.all(np.linalg.eigvalsh(S) > 0)


def test_cg_threads_capped(monkeypatch, oscillator_1d):
    H, _ = oscillator_1d
    monkeypatch.setenv("ORTHO_FLOW_THREADS", "2")
    solver = GreenSolver(H, backend="cg", n_threads=8, verbose=1)
    assert solver.n_threads == 2
    direct = GreenSolver(H, verbose=1)
    X = random_orthonormal_init(H.grid, 4, seed=5).data
    assert np.allclose(solver.solve(X), direct.solve(X), rtol=1e-8, atol=1e-10)


def test_cg_non_convergence(oscillator_1d):
    H, _ = oscillator_1d
    solver = GreenSolver(H, backend="cg", cg_max_iter=2, verbose=1)
    X = random_orthonormal_init(H.grid, 2, seed=6).data
    with pytest.raises(SolverConvergenceError):
        solver.solve(X)


def test_hydrogen_without_shift_not_positive_definite():
    grid = build_grid(Box([-10.0] * 3, [10.0] * 3), 9)
    H = assemble(grid, coulomb(), c_lap=0.5, shift=0.0)
    with pytest.raises(NotPositiveDefiniteError):
        GreenSolver(H, verbose=1)
    shifted = assemble(grid, coulomb(), c_lap=0.5, shift=1.0)
    GreenSolver(shifted, verbose=1)


def test_green_operator_mismatch(oscillator_1d):
    H, solver = oscillator_1d
    other = assemble(H.grid, harmonic(2.0), c_lap=0.5)
    U = random_orthonormal_init(H.grid, 2, seed=0)
    with pytest.raises(ValueError):
        apply_green(other, solver, U)


def test_invalid_assembly():
    grid = build_grid(Box([0.0], [1.0]), 10)
    with pytest.raises(ValueError):
        assemble(grid, "constant", c_lap=0.0)
    with pytest.raises(ValueError):
        assemble(grid, "constant", shift=-1.0)
