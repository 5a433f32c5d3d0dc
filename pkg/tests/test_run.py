"""
Tests for the Runner: full experiments, outputs, checkpoints and comparisons.
"""

import os

import pytest
import numpy as np
import pandas as pd

from orthoflow.run import (
    Runner, sweep_tau, pairwise_agreement, refinement_study, compare_reference,
    output_filenames,
)
from orthoflow.io import (
    read_summary, read_reference, write_reference, update_summary, PackFormatError,
)
from orthoflow.operator import OrbitalSet
from orthoflow.oracle import reference_eigenpairs
from orthoflow.progress import Progress, records_columns


def _small_oscillator(**overrides):
    info = {
        "preset": "oscillator1d",
        "problem": {"cells_per_dim": [64], "N": 2},
        "flow": {"tau": 0.5, "tol": 1e-10, "max_iter": 5000},
        "output": {"progress_bar": False},
    }
    for section, values in overrides.items():
        info[section] = {**info.get(section, {}), **values}
    return info


def test_run_writes_outputs(tmp_path):
    out = str(tmp_path / "run")
    runner = Runner(_small_oscillator(), output_dir=out, verbose=1)
    assert runner.run()
    for key in ("records", "summary", "eigenvalues", "orbitals"):
        assert os.path.isfile(runner.output_path(key))
    assert not os.path.exists(runner.output_path("orbital_errors"))
    with open(runner.output_path("records"), encoding="utf-8") as f:
        assert f.readline().strip() == ",".join(records_columns)
    summary = read_summary(runner.output_path("summary"))
    assert summary["converged"] and summary["critical_point"] == "ground"
    assert summary["problem"] == "oscillator1d"
    assert summary["initial_distribution"] == "standard normal"
    assert summary["seed"] == 0
    assert summary["n_solves"] > summary["n_iterations"]
    assert max(summary["err_i"]) < 1e-6
    assert np.allclose(summary["eigenvalues"], [0.5, 1.5], atol=1e-2)
    assert np.allclose(summary["analytic_eigenvalues"], [0.5, 1.5])
    assert summary["max_ortho_err"] < 1e-11
    assert summary["rate_fits"]["err_E"]["slope"] < 0
    assert summary["config"]["problem"]["N"] == 2
    table = pd.read_csv(runner.output_path("eigenvalues"))
    assert list(table.columns) == ["i", "lambda", "lambda_ref", "err_i"]
    assert list(table["i"]) == [1, 2]
    # final orbitals are written as a reference pack on the same grid
    final = read_reference(runner.output_path("orbitals"), grid=runner.grid)
    assert np.allclose(final.Lambda, runner.eigenvalues)


def test_err_U_replay(tmp_path):
    runner = Runner(
        _small_oscillator(output={"emit": {"orbital_errors_csv": True}}),
        output_dir=str(tmp_path), verbose=1,
    )
    runner.run()
    err_U = runner.progress.column("err_U")
    assert len(err_U) == runner.state.n + 1
    assert err_U[0] > 0.1
    assert err_U[-1] < 1e-12
    table = pd.read_csv(runner.output_path("orbital_errors"))
    assert list(table.columns) == ["n", "err_U_1", "err_U_2"]
    assert len(table) == len(err_U)


def test_no_output(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    runner = Runner(_small_oscillator(), output_dir=False, verbose=1)
    runner.run()
    assert runner.checkpoint_path is None
    assert not os.listdir(tmp_path)


def test_same_seed_same_results():
    first = Runner(_small_oscillator(), output_dir=False, verbose=1)
    second = Runner(_small_oscillator(), output_dir=False, verbose=1)
    first.run()
    second.run()
    assert np.array_equal(first.eigenvalues, second.eigenvalues)
    assert first.state.n == second.state.n
    for summary in (first.summary, second.summary):
        summary.pop("wall_time")
    assert first.summary.keys() == second.summary.keys()


def test_max_iter_reached():
    runner = Runner(
        _small_oscillator(flow={"max_iter": 3}), output_dir=False, verbose=1
    )
    assert not runner.run()
    assert runner.summary["n_iterations"] == 3
    assert len(runner.progress) == 4


def test_non_ground_critical_point():
    runner = Runner(_small_oscillator(), output_dir=False, verbose=1)
    dense = reference_eigenpairs(runner.operator, 3, mode="dense", verbose=1)
    # the first and third eigenvectors span a stationary, non-minimal subspace
    U0 = OrbitalSet(dense.Ustar.data[:, [0, 2]], runner.grid)
    assert runner.run(U0=U0)
    assert runner.summary["critical_point"] == "non-ground"
    assert np.allclose(runner.eigenvalues, dense.Lambda[[0, 2]], rtol=1e-8)


def test_resume_from_checkpoint(tmp_path):
    out = str(tmp_path)
    checkpointed = {"checkpoint_every": 5, "load_checkpoint": "resume"}
    first = Runner(
        _small_oscillator(flow={"max_iter": 10}, output=checkpointed),
        output_dir=out, verbose=1,
    )
    assert not first.run()
    resumed = Runner(_small_oscillator(output=checkpointed), output_dir=out, verbose=1)
    assert resumed.run()
    assert list(resumed.progress.column("n")) == list(range(resumed.state.n + 1))
    assert resumed.progress.column("err_U")[-1] < 1e-12
    straight = Runner(_small_oscillator(), output_dir=False, verbose=1)
    straight.run()
    assert resumed.state.n == straight.state.n
    assert np.allclose(resumed.eigenvalues, straight.eigenvalues, rtol=1e-12)


def test_checkpoint_of_other_grid_rejected(tmp_path):
    out = str(tmp_path)
    checkpointed = {"checkpoint_every": 5, "load_checkpoint": "resume"}
    Runner(
        _small_oscillator(flow={"max_iter": 5}, output=checkpointed),
        output_dir=out, verbose=1,
    ).run()
    other = Runner(
        _small_oscillator(problem={"cells_per_dim": [48]}, output=checkpointed),
        output_dir=out, verbose=1,
    )
    with pytest.raises(PackFormatError):
        other.run()


def test_loaded_reference(tmp_path):
    runner = Runner(_small_oscillator(), output_dir=str(tmp_path / "ref"), verbose=1)
    pack = runner.write_reference()
    path = runner.output_path("reference")
    loaded = Runner(
        _small_oscillator(output={"reference": path}), output_dir=False, verbose=1
    )
    assert loaded.run()
    assert np.allclose(loaded.summary["lambda_ref"], pack.Lambda)
    too_large = Runner(
        _small_oscillator(problem={"N": 4}, output={"reference": path}),
        output_dir=False, verbose=1,
    )
    with pytest.raises(PackFormatError, match="orbitals"):
        too_large.get_reference()


def test_reference_with_other_shift_rejected(tmp_path):
    path = str(tmp_path / "reference.txt")
    runner = Runner(_small_oscillator(), output_dir=False, verbose=1)
    write_reference(path, runner.get_reference())
    shifted = Runner(
        _small_oscillator(problem={"shift": 1.0}, output={"reference": path}),
        output_dir=False, verbose=1,
    )
    with pytest.raises(PackFormatError, match="shift"):
        shifted.get_reference()


def test_cg_backend_reference_uses_the_same_solver(monkeypatch):
    def no_factorization(*args, **kwargs):
        raise AssertionError("the reference eigensolver built its own solver")

    monkeypatch.setattr("orthoflow.oracle.GreenSolver", no_factorization)
    runner = Runner(
        _small_oscillator(solver={"backend": "cg", "oracle_mode": "iterative"}),
        output_dir=False, verbose=1,
    )
    assert runner.solver.backend == "cg"
    assert runner.run()
    assert np.all(np.array(runner.summary["err_i"]) < 1e-6)
    assert np.allclose(runner.eigenvalues, [0.5, 1.5], atol=1e-2)


def test_compare_reference(tmp_path):
    out = str(tmp_path / "run")
    Runner(_small_oscillator(), output_dir=out, verbose=1).run()
    own = os.path.join(out, output_filenames["orbitals"])
    comparison = compare_reference(out, own, verbose=1)
    assert comparison["delta_L2"] < 1e-7
    assert comparison["dist_class_a"] < 1e-10
    assert max(comparison["err_i"]) < 1e-14
    assert comparison["replayed"]
    summary = read_summary(os.path.join(out, output_filenames["summary"]))
    assert "comparison" in summary
    errors = pd.read_csv(os.path.join(out, output_filenames["comparison"]))
    assert list(errors.columns) == ["n", "err_E", "err_U", "dist_class_a"]
    assert len(errors) == summary["n_iterations"] + 1
    # the replay ends exactly at the stored final state
    assert errors["err_U"].iloc[-1] < 1e-10
    single = Runner(
        _small_oscillator(problem={"N": 1}), output_dir=str(tmp_path / "single"),
        verbose=1,
    ).write_reference()
    path = str(tmp_path / "single.txt")
    write_reference(path, single)
    with pytest.raises(PackFormatError):
        compare_reference(out, path, verbose=1)


def test_compare_reference_rates(tmp_path):
    out = str(tmp_path / "run")
    runner = Runner(_small_oscillator(), output_dir=out, verbose=1)
    runner.run()
    path = str(tmp_path / "reference.txt")
    write_reference(path, runner.get_reference())
    comparison = compare_reference(out, path, verbose=1)
    fits = comparison["rate_fits"]
    assert fits["err_U"]["slope"] < 0
    assert fits["err_U"]["r_squared"] > 0.99
    # energy errors are quadratic in the subspace error
    assert 1.6 < fits["err_E"]["slope"] / fits["err_U"]["slope"] < 2.4
    errors = pd.read_csv(os.path.join(out, output_filenames["comparison"]))
    assert errors["err_U"].iloc[-1] < 1e-3 * errors["err_U"].iloc[0]
    # without replay only the energy errors are available
    comparison = compare_reference(out, path, replay=False, verbose=1)
    assert not comparison["replayed"]
    assert comparison["rate_fits"]["err_U"] is None
    assert comparison["rate_fits"]["err_E"] is not None


def test_compare_reference_replay_mismatch(tmp_path):
    out = str(tmp_path / "run")
    Runner(_small_oscillator(), output_dir=out, verbose=1).run()
    summary_path = os.path.join(out, output_filenames["summary"])
    config = read_summary(summary_path)["config"]
    config["flow"]["seed"] += 1
    update_summary(summary_path, config=config)
    own = os.path.join(out, output_filenames["orbitals"])
    with pytest.warns(UserWarning, match="Replay"):
        comparison = compare_reference(out, own, verbose=1)
    assert not comparison["replayed"]
    assert comparison["rate_fits"]["err_U"] is None


def test_sweep_tau(tmp_path):
    taus = [0.1, 0.25, 0.5]
    table, runners = sweep_tau(
        _small_oscillator(flow={"tol": 1e-12}), taus, output_dir=str(tmp_path),
        verbose=1,
    )
    assert list(table.columns) == ["tau=0.1", "tau=0.25", "tau=0.5"]
    assert list(table.index) == ["1", "2", "steps"]
    steps = table.loc["steps"].to_numpy()
    assert np.all(np.diff(steps) < 0)
    assert np.all(table.iloc[:2].to_numpy() < 1e-6)
    assert np.all(pairwise_agreement(runners) <= 1e-8)
    # the reference is computed once
    assert all(r.reference is runners[0].reference for r in runners)
    for tau in ("0.1", "0.25", "0.5"):
        assert os.path.isfile(tmp_path / f"tau_{tau}" / output_filenames["summary"])
    loaded = pd.read_csv(tmp_path / output_filenames["tau_sweep"], index_col=0)
    assert loaded.shape == (3, 3)


def test_refinement_is_second_order(tmp_path):
    table = refinement_study(
        _small_oscillator(problem={"N": 3}), [32, 64, 128], output_dir=str(tmp_path),
        verbose=1,
    )
    assert list(table["cells"]) == [32, 64, 128]
    assert list(table["n_g"]) == [31, 63, 127]
    assert np.all(np.diff(table["err_1"]) < 0)
    assert 1.8 <= table["order_1"].iloc[-1] <= 2.2
    assert os.path.isfile(tmp_path / output_filenames["refinement"])


def test_progress_from_records_csv(tmp_path):
    runner = Runner(_small_oscillator(), output_dir=str(tmp_path), verbose=1)
    runner.run()
    loaded = Progress.read_csv(runner.output_path("records"))
    assert np.allclose(
        loaded.column("delta_L2")[1:], runner.progress.column("delta_L2")[1:]
    )
    assert loaded.column("delta_L2")[-1] < 1e-4
