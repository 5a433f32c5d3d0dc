"""
Module that defines the ``Runner`` class, which handles input, the evolution loop,
the comparison with a reference eigenbasis, and the processing of results.
"""

import os
import warnings
from dataclasses import replace

import numpy as np
import pandas as pd

from orthoflow import __version__
from orthoflow import flow
from orthoflow.config import load_config, ExperimentConfig, analytic_eigenvalues
from orthoflow.grid import get_potential
from orthoflow.operator import assemble, GreenSolver
from orthoflow.oracle import reference_eigenpairs
from orthoflow.diagnostics import (
    ReferencePack, DiagnosticsError, subspace_distances, perp_norm_a, fit_rate,
    contraction_ratios, continuous_rate, relative_block_error, relative_column_errors,
    end_point_skip,
)
from orthoflow.progress import Progress, Timer, TimerCounter
from orthoflow.io import (
    create_path, check_checkpoint, read_checkpoint, save_checkpoint, write_reference,
    read_reference, write_summary, read_summary, update_summary, PackFormatError,
)
from orthoflow.tools import relative_errors

_checkpoint_path = "checkpoint"

#: Relative excess of the final energy over the ground-state energy flagging a
#: non-ground critical point.
critical_point_rtol = 1e-6

#: Largest relative distance between a replayed final state and the stored one.
replay_rtol = 1e-8

#: Distribution of the entries of the random initial state (before orthonormalisation).
initial_distribution = "standard normal"

output_filenames = {
    "records": "records.csv",
    "summary": "summary.json",
    "eigenvalues": "eigenvalues.csv",
    "orbital_errors": "orbital_errors.csv",
    "orbitals": "final_orbitals.txt",
    "reference": "reference.txt",
    "tau_sweep": "tau_sweep.csv",
    "refinement": "refinement.csv",
    "comparison": "comparison.csv",
}


def _fit_or_none(series, n=None, skip_last=0.0):
    try:
        return fit_rate(series, n=n, skip_last=skip_last)
    except DiagnosticsError:
        return None


def _fit_as_dict(fit):
    return None if fit is None else fit._asdict()


class Runner:
    r"""
    Class that takes care of setting up the discrete problem, running the
    orthogonality-preserving evolution and comparing it with a reference eigensolver.
    After initialisation, the evolution can be launched with :func:`Runner.run`.

    Parameters
    ----------
    config : str, dict or ExperimentConfig
        Experiment configuration, or path to a TOML file (see :mod:`orthoflow.config`).
    potential : Potential or callable, optional
        Overrides the potential of the configuration (e.g. a Python callable for custom
        problems).
    reference : ReferencePack, optional
        Reference eigenbasis to use instead of computing or loading one.
    output_dir : str, optional
        Overrides ``config.output.output_dir``. Pass ``False`` for no output at all.
    overrides : dict, optional
        Configuration values overriding those in ``config``.
    verbose : int (default: 3)
        Verbosity: 1 errors only, 2 warnings, 3 info, 4 debug.

    Attributes
    ----------
    grid : TensorGrid
    operator : HamiltonianOperator
    solver : GreenSolver
    reference : ReferencePack or None
    state : FlowState
        Final state after :func:`Runner.run`.
    progress : Progress
        Per-iteration records.
    eigenvalues : numpy.ndarray
        Final (shift-corrected) eigenvalue approximations.
    err_U_columns : numpy.ndarray or None
        Per-orbital relative distances to the final state, one row per iterate.
    """

    def __init__(self, config, potential=None, reference=None, output_dir=None,
                 overrides=None, verbose=3):
        self.verbose = verbose
        self.config = load_config(config, overrides=overrides)
        if output_dir is not None:
            self.config.output.output_dir = output_dir or ""
        self.output_dir = self.config.output.output_dir or None
        self.grid = self.config.grid()
        self.potential = (
            get_potential(potential) if potential is not None
            else self.config.potential()
        )
        with Timer() as timer:
            self.operator = assemble(
                self.grid, self.potential, c_lap=self.config.problem.c_lap,
                shift=self.config.problem.shift,
            )
            self.solver = GreenSolver(
                self.operator, backend=self.config.solver.backend,
                cg_rel_tol=self.config.solver.cg_rel_tol,
                cg_max_iter=self.config.solver.cg_max_iter,
                n_threads=self.config.solver.n_threads, verbose=verbose,
            )
        self.log(
            f"[GREEN] Operator with {self.grid.n_g} unknowns assembled and "
            f"{'factorized' if self.solver.backend == 'direct' else 'set up for CG'} "
            f"in {timer.time:.2f} sec.", level=3,
        )
        self.flow_config = self.config.flow_config()
        self.reference = reference
        self.U0 = None
        self.state = None
        self.progress = Progress()
        self.eigenvalues = None
        self.summary = {}
        self.err_U_columns = None

    @property
    def N(self):
        """Number of orbitals."""
        return self.config.problem.N

    @property
    def checkpoint_path(self):
        """Folder of the checkpoint files, or None if there is no output folder."""
        if not self.output_dir:
            return None
        return os.path.join(self.output_dir, _checkpoint_path)

    def output_path(self, key):
        """Path of one of the output files."""
        return os.path.join(self.output_dir, output_filenames[key])

    def log(self, msg, level=None):
        """
        Print a message if its verbosity level is equal or lower than the given one (or
        always if ``level=None``.
        """
        if level is None or level <= self.verbose:
            print(msg)

    def banner(self, text, max_line_length=79, prefix="| ", suffix=" |",
               header="=", footer="=", level=3):
        """Creates an iteration banner."""
        default_header_footer = "="
        if header:
            if not isinstance(header, str):
                header = default_header_footer
            self.log(max_line_length * str(header), level=level)
        text = text.strip("\n")
        lines = text.split("\n")
        for line in lines:
            line = prefix + line
            left_before_suffix = max_line_length - len(line) - len(suffix)
            if left_before_suffix >= 0:
                line += " " * left_before_suffix + suffix
            self.log(line, level=level)
        if footer:
            if not isinstance(footer, str):
                footer = default_header_footer
            self.log(max_line_length * str(footer), level=level)

    def ensure_paths(self):
        """Creates the output and checkpoint folders."""
        if self.output_dir:
            create_path(self.output_dir, verbose=self.verbose >= 3)
            if self.config.output.checkpoint_every:
                create_path(self.checkpoint_path, verbose=self.verbose >= 3)

    def get_reference(self):
        """
        Returns the reference eigenbasis: the one passed at init, the one in the file
        given by ``config.output.reference``, or a newly computed one.
        """
        if self.reference is not None:
            return self.reference
        path = self.config.output.reference
        if path:
            self.log(f"[ORACLE] Loading reference from {path}", level=3)
            pack = read_reference(path, grid=self.grid)
            if pack.shift != self.operator.shift:
                raise PackFormatError(
                    f"Reference {path} was computed with shift {pack.shift}, "
                    f"not {self.operator.shift}."
                )
        else:
            pack = reference_eigenpairs(
                self.operator, self.N, mode=self.config.solver.oracle_mode,
                solver=self.solver,
                max_iter=self.config.solver.oracle_max_iter, verbose=self.verbose,
            )
        if pack.N < self.N:
            raise PackFormatError(
                f"The reference has {pack.N} orbitals but the run needs {self.N}."
            )
        self.reference = pack.restricted(self.N)
        return self.reference

    def write_reference(self):
        """Computes (if needed) and writes the reference pack to the output folder."""
        pack = self.get_reference()
        if self.output_dir:
            self.ensure_paths()
            write_reference(self.output_path("reference"), pack)
            self.log(
                f"[OUTPUT] Reference written to {self.output_path('reference')}", 3
            )
        return pack

    def _on_iteration(self, state):
        record = state.history[-1]
        if self.reference is not None:
            distances = subspace_distances(state.U, self.reference, self.operator)
            record.delta_L2 = distances.delta_L2
            record.delta_H1 = distances.delta_H1
            record.dist_class_a = distances.dist_class_a
            record.perp_norm_a = perp_norm_a(state.U, self.reference, self.operator)
        every = self.config.output.checkpoint_every
        if every and self.checkpoint_path and state.n % every == 0:
            self.save_checkpoint(state)

    def save_checkpoint(self, state):
        """Saves the given state, its records and the run options."""
        save_checkpoint(
            self.checkpoint_path, state, Progress.from_records(state.history),
            {"config": self.config.model_dump(mode="json"), "U0": self.U0},
        )
        self.log(f"[CHECKPOINT] Saved state at iteration {state.n}.", level=4)

    def _load_checkpoint(self):
        if self.config.output.load_checkpoint != "resume" or not self.checkpoint_path:
            return None
        if not all(check_checkpoint(self.checkpoint_path)):
            self.log("[CHECKPOINT] No complete checkpoint found: starting anew.", 3)
            return None
        state, _, options = read_checkpoint(self.checkpoint_path)
        if state.U.grid != self.grid or state.U.N != self.N:
            raise PackFormatError(
                "The checkpoint was produced for a different grid or number of "
                "orbitals."
            )
        self.U0 = options["U0"]
        self.log(f"[CHECKPOINT] Resuming from iteration {state.n}.", level=3)
        return state

    def run(self, U0=None):
        """
        Runs the evolution, computes diagnostics and writes the results.

        Parameters
        ----------
        U0 : OrbitalSet, optional
            L2-orthonormal initial state (default: random, with the configured seed).
            Ignored when resuming from a checkpoint.

        Returns
        -------
        bool
            Whether the evolution converged within ``max_iter`` steps.
        """
        self.banner(
            f"Problem '{self.config.name}': {self.grid.dim}-d grid with "
            f"{self.grid.n_g} unknowns, N = {self.N}\ntau = {self.flow_config.tau}, "
            f"tol = {self.flow_config.tol:.1e}, backend = {self.solver.backend}"
        )
        self.ensure_paths()
        with TimerCounter(self.solver) as timer:
            if self.config.output.compute_reference or self.config.output.reference:
                self.get_reference()
            state = self._load_checkpoint()
            if state is None:
                self.U0 = U0 if U0 is not None else flow.random_orthonormal_init(
                    self.grid, self.N, self.flow_config.seed
                )
            self.state, _ = flow.run(
                self.flow_config, self.operator, self.solver,
                U0=None if state is not None else self.U0, state=state,
                callback=self._on_iteration,
                progress_bar=self.config.output.progress_bar, verbose=self.verbose,
            )
            if self.config.output.checkpoint_every and self.checkpoint_path:
                self.save_checkpoint(self.state)
            self.eigenvalues = flow.extract_eigenvalues(
                self.state.U, self.operator, self.solver, W=self.state.W
            )
            self.progress = Progress.from_records(self.state.history)
            if self.config.output.replay_err_U:
                self.replay_err_U()
            self.summary = self.summarize()
        self.summary["wall_time"] = timer.time
        self.summary["n_solves"] = timer.solves
        self.write_outputs()
        return self.state.converged

    def _replay(self, n_end):
        """Iterates again from ``self.U0`` up to iteration ``n_end``."""
        config = replace(self.flow_config, max_iter=max(n_end, 1))
        for state in flow.iterate(config, self.operator, self.solver, U0=self.U0,
                                  track_residual=False):
            yield state
            if state.n >= n_end:
                break

    def replay_err_U(self):
        """
        Recomputes the iterates from the same initial state to evaluate
        ``err_U^n = ||U^n - U_end|| / ||U_end||`` without storing the history.
        """
        U_end, n_end = self.state.U, self.state.n
        self.log(f"[FLOW] Replaying {n_end} steps to compute err_U.", level=3)
        errors, columns = [], []
        for state in self._replay(n_end):
            errors.append(relative_block_error(state.U, U_end))
            columns.append(relative_column_errors(state.U, U_end))
        if len(errors) != len(self.progress):
            warnings.warn(
                f"Replay produced {len(errors)} iterates for {len(self.progress)} "
                "records: err_U not stored."
            )
            return
        if errors[-1] != 0:
            warnings.warn(
                f"Replay did not reproduce the final state (err_U = {errors[-1]:.3g})."
            )
        self.progress.set_column("err_U", errors)
        self.err_U_columns = np.array(columns)

    def replay_reference_errors(self, U_end, n_end):
        """
        Recomputes the iterates of a completed run from ``self.U0`` and measures every
        one of them against the reference eigenbasis.

        Parameters
        ----------
        U_end : OrbitalSet
            Final state of the run, which the replay must reproduce.
        n_end : int
            Number of steps of the run.

        Returns
        -------
        pandas.DataFrame or None
            Columns ``n``, ``err_U`` (``min_Q ||U^n - U* Q|| / ||U*||``) and
            ``dist_class_a``; ``None`` if the replay does not end at ``U_end``.
        """
        pack = self.get_reference()
        self.log(f"[FLOW] Replaying {n_end} steps against the reference.", level=3)
        rows, last = [], None
        for state in self._replay(n_end):
            distances = subspace_distances(state.U, pack, self.operator)
            rows.append((
                state.n, distances.dist_class_L2 / np.sqrt(self.N),
                distances.dist_class_a,
            ))
            last = state
        drift = relative_block_error(last.U, U_end)
        if last.n != n_end or not drift <= replay_rtol:
            warnings.warn(
                f"Replay ended at iteration {last.n} at a distance {drift:.3g} from the "
                f"final state of the run (iteration {n_end}): errors against the "
                "reference not recomputed."
            )
            return None
        return pd.DataFrame(rows, columns=["n", "err_U", "dist_class_a"])

    def summarize(self):
        """Collects the results of the run into a dict (the content of summary.json)."""
        state, progress, pack = self.state, self.progress, self.reference
        n = progress.column("n")
        fits = {
            "err_E": _fit_or_none(progress.column("err_E"), n=n),
            "err_U": _fit_or_none(
                progress.column("err_U"), n=n, skip_last=end_point_skip
            ),
            "dist_class_a": _fit_or_none(progress.column("dist_class_a"), n=n),
        }
        slope_ratio = None
        if None not in (fits["err_E"], fits["err_U"]) and fits["err_U"].slope:
            slope_ratio = fits["err_E"].slope / fits["err_U"].slope
        summary = {
            "problem": self.config.name,
            "code_version": __version__,
            "converged": bool(state.converged),
            "n_iterations": int(state.n),
            "eigenvalues": self.eigenvalues,
            "energy": state.energy,
            "energy_shift_corrected": state.energy_shift_corrected,
            "max_ortho_err": float(np.nanmax(progress.column("ortho_err"))),
            "max_asymmetry": float(np.nanmax(progress.column("asymmetry"))),
            "energy_floor": self.flow_config.energy_floor,
            "energy_floor_active": bool(np.any(
                np.abs(progress.column("energy")) < self.flow_config.energy_floor
            )),
            "rate_fits": {k: _fit_as_dict(v) for k, v in fits.items()},
            "slope_ratio_err_E_err_U": slope_ratio,
            "initial_distribution": initial_distribution,
            "seed": self.flow_config.seed,
            "config": self.config.model_dump(mode="json"),
        }
        analytic = analytic_eigenvalues(self.config, self.N)
        if analytic is not None:
            summary["analytic_eigenvalues"] = analytic
        if pack is not None:
            err_i = relative_errors(self.eigenvalues, pack.Lambda)
            _, omega = contraction_ratios(progress.column("perp_norm_a"))
            rate = continuous_rate(pack)
            summary.update({
                "lambda_ref": pack.Lambda,
                "err_i": err_i,
                "lambda_Np1_ref": pack.lambda_Np1,
                "E_GS": pack.E_GS,
                "E_ES": pack.E_ES,
                "reference_residuals": pack.residuals,
                "omega": omega,
                "continuous_rate": rate,
                "continuous_rate_times_tau": rate * self.flow_config.tau,
            })
            excess = state.energy - pack.E_GS
            if excess > critical_point_rtol * abs(pack.E_GS):
                summary["critical_point"] = "non-ground"
                self.log(
                    f"[CONVERGENCE] *WARNING* Final energy exceeds the ground-state "
                    f"energy by {excess:.3g}: the evolution reached a non-ground "
                    "critical point.", level=2,
                )
            else:
                summary["critical_point"] = "ground"
        return summary

    def write_outputs(self):
        """Writes the output files selected in ``config.output.emit``."""
        if not self.output_dir:
            return
        emit = self.config.output.emit
        if emit.records_csv:
            self.progress.to_csv(self.output_path("records"))
        if emit.summary_json:
            write_summary(self.output_path("summary"), self.summary)
        if emit.eigenvalue_table_csv:
            self.eigenvalue_table().to_csv(
                self.output_path("eigenvalues"), index=False, na_rep="",
                float_format="%.17g",
            )
        if emit.orbital_errors_csv and self.err_U_columns is not None:
            table = pd.DataFrame(
                self.err_U_columns,
                columns=[f"err_U_{i + 1}" for i in range(self.N)],
            )
            table.insert(0, "n", self.progress.column("n"))
            table.to_csv(
                self.output_path("orbital_errors"), index=False, float_format="%.17g"
            )
        if emit.final_orbitals:
            write_reference(
                self.output_path("orbitals"),
                ReferencePack(
                    Ustar=self.state.U,
                    operator_eigenvalues=self.eigenvalues + self.operator.shift,
                    shift=self.operator.shift,
                ),
            )
        self.log(f"[OUTPUT] Results written to {self.output_dir}", level=3)

    def eigenvalue_table(self):
        """Table with columns ``i, lambda, lambda_ref, err_i``."""
        table = pd.DataFrame({
            "i": np.arange(1, self.N + 1),
            "lambda": self.eigenvalues,
            "lambda_ref": np.nan,
            "err_i": np.nan,
        })
        if self.reference is not None:
            table["lambda_ref"] = self.reference.Lambda
            table["err_i"] = relative_errors(self.eigenvalues, self.reference.Lambda)
        return table


def sweep_tau(config, taus, output_dir=None, verbose=3, **kwargs):
    """
    Runs the same experiment for several time steps, sharing the reference eigenbasis,
    and tabulates the relative eigenvalue errors per time step together with the number
    of steps.

    Parameters
    ----------
    config : str, dict or ExperimentConfig
    taus : list of float
    output_dir : str, optional
        Each run writes to ``<output_dir>/tau_<tau>``; the combined table goes to
        ``<output_dir>/tau_sweep.csv``.

    Returns
    -------
    ``(table, runners)``: a ``pandas.DataFrame`` indexed by orbital number plus a final
    ``steps`` row, with one column per time step, and the list of :class:`Runner`.
    """
    config = load_config(config)
    output_dir = config.output.output_dir if output_dir is None else output_dir
    reference, runners = None, []
    for tau in taus:
        overrides = {"flow": {"tau": tau, "tau_min": None, "tau_max": None}}
        sub_dir = os.path.join(output_dir, f"tau_{tau:g}") if output_dir else False
        runner = Runner(
            config, overrides=overrides, reference=reference, output_dir=sub_dir,
            verbose=verbose, **kwargs,
        )
        runner.run()
        reference = runner.reference
        runners.append(runner)
    columns = {}
    for tau, runner in zip(taus, runners):
        errors = runner.summary.get("err_i", np.full(runner.N, np.nan))
        columns[f"tau={tau:g}"] = list(errors) + [runner.state.n]
    index = [str(i) for i in range(1, runners[0].N + 1)] + ["steps"]
    table = pd.DataFrame(columns, index=pd.Index(index, name="i"))
    if output_dir:
        create_path(output_dir, verbose=verbose >= 3)
        table.to_csv(os.path.join(output_dir, output_filenames["tau_sweep"]),
                     float_format="%.6e")
    return table, runners


def pairwise_agreement(runners):
    """
    Largest relative difference between the eigenvalues of every pair of runs, per
    orbital.
    """
    values = np.array([r.eigenvalues for r in runners])
    spread = np.max(values, axis=0) - np.min(values, axis=0)
    return spread / np.abs(np.mean(values, axis=0))


def refinement_study(config, cells, output_dir=None, verbose=3):
    """
    Computes the reference eigenvalues of an experiment for several grid resolutions and
    compares them with the analytic continuum values.

    Parameters
    ----------
    config : str, dict or ExperimentConfig
    cells : list of int
        Number of cells per dimension of each grid.
    output_dir : str, optional
        If given, writes ``refinement.csv`` there.

    Returns
    -------
    pandas.DataFrame with one row per grid: ``cells, n_g, h, lambda_1..lambda_N`` and,
    if analytic values are known, ``err_1..err_N`` and the observed convergence order of
    ``lambda_1``.
    """
    config = load_config(config)
    dim = len(config.problem.lower)
    analytic = analytic_eigenvalues(config, config.problem.N)
    rows = []
    for m in cells:
        sub = config.model_dump()
        sub["problem"]["cells_per_dim"] = [int(m)] * dim
        sub = ExperimentConfig(**sub)
        H = assemble(
            sub.grid(), sub.potential(), c_lap=sub.problem.c_lap,
            shift=sub.problem.shift,
        )
        solver = GreenSolver(
            H, backend=sub.solver.backend, cg_rel_tol=sub.solver.cg_rel_tol,
            cg_max_iter=sub.solver.cg_max_iter, n_threads=sub.solver.n_threads,
            verbose=verbose,
        )
        pack = reference_eigenpairs(
            H, sub.problem.N, mode=sub.solver.oracle_mode, solver=solver,
            max_iter=sub.solver.oracle_max_iter, check_gap=False, verbose=verbose,
        )
        row = {"cells": int(m), "n_g": H.n_g, "h": float(np.max(H.grid.spacing))}
        row.update({f"lambda_{i + 1}": v for i, v in enumerate(pack.Lambda)})
        if analytic is not None:
            err = np.abs(pack.Lambda - analytic)
            row.update({f"err_{i + 1}": e for i, e in enumerate(err)})
        rows.append(row)
        if verbose >= 3:
            print(f"[ORACLE] cells={m}: lambda_1 = {pack.Lambda[0]:.10g}")
    table = pd.DataFrame(rows)
    if analytic is not None and len(table) > 1:
        err, h = table["err_1"].to_numpy(), table["h"].to_numpy()
        with np.errstate(divide="ignore", invalid="ignore"):
            order = np.log(err[1:] / err[:-1]) / np.log(h[1:] / h[:-1])
        table["order_1"] = np.concatenate([[np.nan], order])
    if output_dir:
        create_path(output_dir, verbose=verbose >= 3)
        table.to_csv(
            os.path.join(output_dir, output_filenames["refinement"]), index=False,
            float_format="%.12g",
        )
    return table


def compare_reference(run_dir, pack_path, replay=True, verbose=3):
    """
    Compares a completed run with a reference pack: eigenvalue errors, distances of the
    final state, and rate fits of the errors of every iterate against the reference.
    Results are appended to the run's ``summary.json`` under ``comparison``, and the
    per-iteration errors are written to ``comparison.csv``.

    The energy errors ``|E^n - E*| / |E*|`` come from the recorded shift-corrected
    energies. The iterates themselves are not stored: they are recomputed from the
    configuration and seed of the run to measure the energy-norm class distance and
    ``err_U^n = min_Q ||U^n - U* Q|| / ||U*||``.

    Parameters
    ----------
    run_dir : str
        Output folder of a completed run.
    pack_path : str
        Reference-pack file (e.g. written by the ``reference`` command, or the
        ``final_orbitals.txt`` of another run).
    replay : bool (default: True)
        Whether to recompute the iterates. Otherwise only the energy errors are fitted.

    Returns
    -------
    dict with the comparison results.

    Raises
    ------
    FileNotFoundError
        If some file of the run is missing.
    PackFormatError
        If the reference does not match the grid or the number of orbitals of the run.
    """
    summary_path = os.path.join(run_dir, output_filenames["summary"])
    summary = read_summary(summary_path)
    final = read_reference(os.path.join(run_dir, output_filenames["orbitals"]))
    pack = read_reference(pack_path, grid=final.grid)
    if pack.N < final.N:
        raise PackFormatError(
            f"Reference has {pack.N} orbitals; the run has {final.N}."
        )
    pack = pack.restricted(final.N)
    runner = Runner(
        summary["config"], reference=pack, output_dir=False, verbose=min(verbose, 2)
    )
    if runner.grid != final.grid or runner.N != final.N:
        raise PackFormatError(
            f"The orbitals in {run_dir} do not match the configuration of the run."
        )
    eigenvalues = np.asarray(summary["eigenvalues"], dtype=float)
    distances = subspace_distances(final.Ustar, pack, runner.operator)
    progress = Progress.read_csv(os.path.join(run_dir, output_filenames["records"]))
    E_ref = pack.E_GS_shift_corrected
    errors = pd.DataFrame({
        "n": progress.column("n").astype(int),
        "err_E": np.abs(progress.column("energy_shift_corrected") - E_ref) / max(
            abs(E_ref), runner.flow_config.energy_floor
        ),
    })
    replayed = None
    if replay:
        runner.U0 = flow.random_orthonormal_init(
            runner.grid, runner.N, runner.flow_config.seed
        )
        replayed = runner.replay_reference_errors(
            final.Ustar, int(summary["n_iterations"])
        )
    was_replayed = replayed is not None
    if not was_replayed:
        replayed = pd.DataFrame(columns=["n", "err_U", "dist_class_a"], dtype=float)
    errors = errors.merge(replayed.astype({"n": int}), on="n", how="left")
    n = errors["n"].to_numpy()
    comparison = {
        "reference": os.path.abspath(pack_path),
        "lambda_ref": pack.Lambda,
        "err_i": relative_errors(eigenvalues, pack.Lambda),
        "delta_L2": distances.delta_L2,
        "delta_H1": distances.delta_H1,
        "dist_class_L2": distances.dist_class_L2,
        "dist_class_a": distances.dist_class_a,
        "principal_angles": distances.angles,
        "E_ref": E_ref,
        "replayed": was_replayed,
        "rate_fits": {
            col: _fit_as_dict(_fit_or_none(errors[col].to_numpy(), n=n))
            for col in ("err_E", "err_U", "dist_class_a")
        },
    }
    errors.to_csv(
        os.path.join(run_dir, output_filenames["comparison"]), index=False,
        na_rep="", float_format="%.17g",
    )
    update_summary(summary_path, comparison=comparison)
    if verbose >= 3:
        print(
            f"[OUTPUT] Compared {run_dir} with {pack_path}: max err_i = "
            f"{np.max(comparison['err_i']):.3e}, delta_L2 = {distances.delta_L2:.3e}"
        )
    return comparison
