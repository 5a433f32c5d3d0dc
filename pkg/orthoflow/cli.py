"""
Command-line front end.

Usage::

    orthoflow run <config.toml>
    orthoflow sweep-tau <config.toml> --taus 0.05,0.5,1.0
    orthoflow reference <config.toml>
    orthoflow compare <run_dir> <reference.txt>
    orthoflow refine <config.toml> --cells 32,64,128

Configuration files are TOML with the sections ``[problem]``, ``[solver]``, ``[flow]``
and ``[output]``, and an optional top-level ``preset`` (one of ``oscillator1d``,
``oscillator2d``, ``hydrogen3d``) whose values are overridden by the file. Unknown keys
are errors.

Exit codes: 0 converged; 2 maximum number of iterations reached; 3 invalid usage,
configuration, missing file, or reference/run mismatch; 4 numerical abort.
"""

import os
import sys
import argparse
import traceback

import numpy as np

from orthoflow import __version__
from orthoflow.config import ConfigError, problem_names
from orthoflow.io import PackFormatError
from orthoflow.operator import NotPositiveDefiniteError, SolverConvergenceError
from orthoflow.smallmat import SmallMatrixError
from orthoflow.flow import FlowError, OrthogonalityAlarm
from orthoflow.oracle import OracleError
from orthoflow.diagnostics import DiagnosticsError
from orthoflow.run import Runner, sweep_tau, pairwise_agreement, refinement_study
from orthoflow.run import compare_reference

EXIT_CONVERGED = 0
EXIT_MAX_ITER = 2
EXIT_INVALID = 3
EXIT_NUMERICAL = 4

_invalid_errors = (ConfigError, PackFormatError, FileNotFoundError)
_numerical_errors = (
    OrthogonalityAlarm, FlowError, NotPositiveDefiniteError, SolverConvergenceError,
    SmallMatrixError, OracleError, DiagnosticsError,
)


def _float_list(text):
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as excpt:
        raise argparse.ArgumentTypeError(
            f"Expected comma-separated numbers. Got {text!r}."
        ) from excpt
    if not values:
        raise argparse.ArgumentTypeError("Empty list.")
    return values


def _int_list(text):
    values = _float_list(text)
    if any(v != int(v) or v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"Expected positive integers. Got {text!r}.")
    return [int(v) for v in values]


def build_parser():
    """Returns the argument parser of the ``orthoflow`` command."""
    parser = argparse.ArgumentParser(
        prog="orthoflow",
        description=__doc__.split("\n\n", 1)[0].strip(),
        epilog=(
            f"Problems: {', '.join(problem_names)}. Exit codes: 0 converged, "
            "2 max_iter reached, 3 invalid input, 4 numerical abort. The environment "
            "variable ORTHO_FLOW_THREADS caps the number of worker threads."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--output-dir", default=None,
        help="Output folder (overrides [output] output_dir); relative paths of the "
        "'compare' verb are taken relative to it.",
    )
    parser.add_argument(
        "-v", "--verbose", type=int, default=3,
        help="Verbosity: 1 errors, 2 warnings, 3 info (default), 4 debug.",
    )
    verbs = parser.add_subparsers(dest="verb", required=True)
    run = verbs.add_parser("run", help="Run the evolution for a configuration.")
    run.add_argument("config", help="TOML configuration file.")
    sweep = verbs.add_parser(
        "sweep-tau", help="Run a configuration for several time steps."
    )
    sweep.add_argument("config", help="TOML configuration file.")
    sweep.add_argument(
        "--taus", type=_float_list, default=[0.05, 0.5, 1.0],
        help="Comma-separated time steps (default: 0.05,0.5,1.0).",
    )
    reference = verbs.add_parser(
        "reference", help="Compute and write the reference eigenbasis."
    )
    reference.add_argument("config", help="TOML configuration file.")
    compare = verbs.add_parser(
        "compare", help="Compare a completed run with a reference file."
    )
    compare.add_argument("run_dir", help="Output folder of a completed run.")
    compare.add_argument("pack", help="Reference file.")
    refine = verbs.add_parser(
        "refine", help="Reference eigenvalues for several grid resolutions."
    )
    refine.add_argument("config", help="TOML configuration file.")
    refine.add_argument(
        "--cells", type=_int_list, required=True,
        help="Comma-separated numbers of cells per dimension.",
    )
    return parser


def _resolve(path, output_dir):
    if output_dir is None or os.path.isabs(path):
        return path
    return os.path.join(output_dir, path)


def run_experiment(config, output_dir=None, verbose=3):
    """Runs one experiment and returns its exit code (0 or 2)."""
    runner = Runner(config, output_dir=output_dir, verbose=verbose)
    converged = runner.run()
    return EXIT_CONVERGED if converged else EXIT_MAX_ITER


def _sweep(args):
    table, runners = sweep_tau(
        args.config, args.taus, output_dir=args.output_dir, verbose=args.verbose
    )
    if args.verbose >= 3:
        print(table.to_string(float_format=lambda x: f"{x:.3e}"))
        agreement = pairwise_agreement(runners)
        print(f"[OUTPUT] Max. pairwise eigenvalue difference: {np.max(agreement):.3e}")
    if all(r.state.converged for r in runners):
        return EXIT_CONVERGED
    return EXIT_MAX_ITER


def _reference(args):
    runner = Runner(args.config, output_dir=args.output_dir, verbose=args.verbose)
    runner.write_reference()
    return EXIT_CONVERGED


def _compare(args):
    compare_reference(
        _resolve(args.run_dir, args.output_dir), _resolve(args.pack, args.output_dir),
        verbose=args.verbose,
    )
    return EXIT_CONVERGED


def _refine(args):
    table = refinement_study(
        args.config, args.cells, output_dir=args.output_dir, verbose=args.verbose
    )
    if args.verbose >= 3:
        print(table.to_string())
    return EXIT_CONVERGED


def main(argv=None):
    """
    Entry point of the ``orthoflow`` command. Returns the exit code.
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as excpt:
        # usage errors share the code of invalid input
        if excpt.code in (0, None):
            raise
        return EXIT_INVALID
    try:
        if args.verb == "run":
            return run_experiment(args.config, args.output_dir, args.verbose)
        return {
            "sweep-tau": _sweep,
            "reference": _reference,
            "compare": _compare,
            "refine": _refine,
        }[args.verb](args)
    except _invalid_errors as excpt:
        print(f"[orthoflow] *ERROR* {excpt}", file=sys.stderr)
        return EXIT_INVALID
    except _numerical_errors as excpt:
        print(
            f"[orthoflow] *ERROR* Numerical abort ({type(excpt).__name__}): {excpt}",
            file=sys.stderr,
        )
        if args.verbose >= 4:
            traceback.print_exc()
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
