"""
End-to-end checks of the claims of the method on the built-in problems.

The tests marked ``slow`` run the desk-scale presets (minutes each); run them with
``pytest --runslow``. The others check the same properties on reduced grids.
"""

import pytest
import numpy as np

from orthoflow import operator as hamiltonian
from orthoflow.run import Runner, sweep_tau, pairwise_agreement
from orthoflow.flow import FlowConfig, run, extract_eigenvalues
from orthoflow.config import analytic_eigenvalues
from orthoflow.diagnostics import (
    ReferencePack, fit_rate, subspace_distances, end_point_skip,
)

from problem_generator import Oscillator


def _reduced_oscillator2d(**flow):
    return {
        "preset": "oscillator2d",
        "problem": {"cells_per_dim": [32, 32], "N": 6},
        "flow": {"tau": 0.5, "tol": 1e-12, **flow},
        "output": {"progress_bar": False},
    }


def _oscillator1d(**flow):
    return {
        "preset": "oscillator1d",
        "problem": {"cells_per_dim": [128]},
        "flow": {"tol": 1e-12, **flow},
        "output": {"progress_bar": False},
    }


def _non_degenerate(pack, rel_gap=1e-2):
    values = np.append(pack.Lambda, pack.lambda_Np1)
    isolated = []
    for i in range(pack.N):
        neighbours = np.delete(values, i)
        if np.min(np.abs(neighbours - values[i])) > rel_gap * abs(values[i]):
            isolated.append(i)
    return isolated


def _check_orthogonality_and_energy(runner):
    ortho = runner.progress.column("ortho_err")
    assert np.max(ortho) <= 1e-10
    E = runner.progress.column("energy")
    assert np.all(np.diff(E) <= 1e-12 * np.abs(E[:-1]))


def _check_rate_law(runner):
    fits = runner.summary["rate_fits"]
    assert fits["err_E"]["r_squared"] >= 0.98
    assert fits["err_U"]["r_squared"] >= 0.98
    assert 1.6 <= runner.summary["slope_ratio_err_E_err_U"] <= 2.4


def _check_orbital_wise(runner):
    columns = runner.err_U_columns
    for i in _non_degenerate(runner.reference):
        fit = fit_rate(columns[:, i], skip_last=end_point_skip)
        assert fit.r_squared >= 0.95, f"Orbital {i + 1} not log-linear."
        assert fit.slope < 0


def _check_tau_sweep(table, runners, tight=10):
    N = runners[0].N
    agreement = pairwise_agreement(runners)
    assert np.all(agreement[:min(tight, N)] <= 1e-8)
    assert np.all(agreement <= 1e-6)
    assert all(r.state.converged for r in runners)
    steps = table.loc["steps"].to_numpy()
    assert np.all(np.diff(steps) < 0)


# Reduced problems


@pytest.fixture(scope="module")
def reduced_sweep():
    return sweep_tau(
        _reduced_oscillator2d(max_iter=20000), [0.05, 0.5, 1.0], output_dir=False,
        verbose=1,
    )


def test_reduced_orthogonality_and_energy(reduced_sweep):
    _, runners = reduced_sweep
    for runner in runners:
        _check_orthogonality_and_energy(runner)


def test_reduced_eigenvalue_accuracy(reduced_sweep):
    _, runners = reduced_sweep
    for runner in runners:
        assert np.all(np.array(runner.summary["err_i"]) <= 1e-8)
    # continuum values up to the second-order grid error, about 2% at h = 0.34
    analytic = analytic_eigenvalues(runners[-1].config, 6)
    assert np.allclose(analytic, [1, 2, 2, 3, 3, 3])
    assert np.allclose(runners[-1].eigenvalues, analytic, rtol=3e-2)


def test_reduced_mesh_independent_tau(reduced_sweep):
    _check_tau_sweep(*reduced_sweep)


def test_reduced_rate_law_and_orbital_convergence():
    runner = Runner(_oscillator1d(), output_dir=False, verbose=1)
    runner.run()
    _check_rate_law(runner)
    assert _non_degenerate(runner.reference) == [0, 1, 2]
    _check_orbital_wise(runner)


def test_zero_orthonormalisations_in_loop():
    runner = Runner(_reduced_oscillator2d(max_iter=2000), output_dir=False, verbose=1)
    # the reference eigensolver orthonormalises on its own
    runner.get_reference()
    calls = hamiltonian.orthonormalization_calls
    runner.run()
    # only the initial random draw is orthonormalised
    assert hamiltonian.orthonormalization_calls == calls + 1


def test_different_seeds_same_class():
    H, solver = Oscillator(dim=1, half_width=8.0, cells=64).get_problem()
    finals = []
    for seed in (0, 1):
        config = FlowConfig(N=2, tau=0.5, tol=1e-13, max_iter=20000, seed=seed)
        finals.append(run(config, H, solver, verbose=1)[0].U)
    pack = ReferencePack(
        Ustar=finals[0], operator_eigenvalues=extract_eigenvalues(finals[0], H, solver)
    )
    # different seeds end at different orbitals of the same class
    assert np.linalg.norm(finals[0].data - finals[1].data) > 1e-3
    assert subspace_distances(finals[1], pack, H).dist_class_a <= 1e-6


# Desk-scale presets


@pytest.fixture(scope="module")
def oscillator2d_sweep():
    return sweep_tau(
        {"preset": "oscillator2d", "solver": {"oracle_mode": "iterative"},
         "output": {"progress_bar": False}},
        [0.05, 0.5, 1.0], output_dir=False, verbose=1,
    )


@pytest.mark.slow
def test_oscillator2d_orthogonality_and_energy(oscillator2d_sweep):
    _, runners = oscillator2d_sweep
    for runner in runners:
        _check_orthogonality_and_energy(runner)


@pytest.mark.slow
def test_oscillator2d_eigenvalue_accuracy(oscillator2d_sweep):
    _, runners = oscillator2d_sweep
    err_i = np.array(runners[0].summary["err_i"])
    assert np.all(err_i[:10] <= 1e-8)
    assert np.all(err_i[10:] <= 1e-6)


@pytest.mark.slow
def test_oscillator2d_mesh_independent_tau(oscillator2d_sweep):
    _check_tau_sweep(*oscillator2d_sweep)


@pytest.mark.slow
def test_oscillator2d_rate_law_and_orbital_convergence(oscillator2d_sweep):
    _, runners = oscillator2d_sweep
    _check_rate_law(runners[0])
    _check_orbital_wise(runners[0])


@pytest.fixture(scope="module")
def hydrogen():
    runner = Runner(
        {"preset": "hydrogen3d", "output": {"progress_bar": False}}, output_dir=False,
        verbose=1,
    )
    runner.run()
    return runner


@pytest.mark.slow
def test_hydrogen_against_same_grid_oracle(hydrogen):
    assert hydrogen.state.converged
    assert np.all(np.array(hydrogen.summary["err_i"]) <= 1e-6)
    _check_orthogonality_and_energy(hydrogen)


@pytest.mark.slow
def test_hydrogen_against_continuum(hydrogen):
    # the tolerances cover the grid error of the 1s level and the box splitting of n = 2
    lam = hydrogen.eigenvalues
    assert abs(lam[0] + 0.5) <= 2e-2
    assert np.ptp(lam[1:]) <= 1e-2
