"""
Reference eigensolver: a conventional, orthonormalisation-based computation of the
lowest eigenpairs of the discrete operator, used to validate the evolution.

Two modes are available:

- ``"dense"``: full symmetric eigendecomposition of ``H`` (grids of at most 4000 nodes);
- ``"iterative"``: block inverse iteration with Rayleigh-Ritz projection, reusing the
  factorisation of a :class:`~orthoflow.operator.GreenSolver`, with explicit
  modified Gram-Schmidt at every outer step.
"""

import numpy as np

from orthoflow.operator import OrbitalSet, GreenSolver, gram, modified_gram_schmidt
from orthoflow.smallmat import sym_eig
from orthoflow.diagnostics import ReferencePack
from orthoflow.progress import TimerCounter
from orthoflow.tools import get_random_generator

#: Largest number of unknowns accepted by the dense mode.
max_dense_size = 4000

#: Required relative residual of every reference eigenpair.
residual_tol = 1e-8

#: Relative gap below which ``lambda_N`` and ``lambda_{N+1}`` are considered equal.
gap_rtol = 1e-6

_modes = ("auto", "dense", "iterative")


class OracleError(ArithmeticError):
    """
    Exception raised when the reference eigenpairs cannot be computed to the required
    accuracy, or when they do not define a gapped problem.
    """


def residuals(H, X, values):
    """
    Relative residuals ``||H x_i - lambda_i x_i|| / |lambda_i|`` in the L2 norm, for
    L2-normalised columns ``x_i`` of ``X``.
    """
    w = H.mass_weight
    R = H.apply(X) - X * values[None, :]
    norms = np.sqrt(w) * np.linalg.norm(X, axis=0)
    return np.sqrt(w) * np.linalg.norm(R, axis=0) / (np.abs(values) * norms)


def _residual_report(values, res):
    return "\n".join(
        f"   {i + 1:>3d}  lambda = {v: .15e}  r = {r:.3e}"
        for i, (v, r) in enumerate(zip(values, res))
    )


def _dense(H, p):
    if H.n_g > max_dense_size:
        raise OracleError(
            f"Dense reference mode is limited to {max_dense_size} unknowns "
            f"(got {H.n_g}). Use mode='iterative'."
        )
    values, vectors = sym_eig(H.matrix.toarray())
    return values[:p], vectors[:, :p] / np.sqrt(H.mass_weight), 1


def _iterative(H, p, solver, guard, tol, max_iter, seed, verbose):
    w = H.mass_weight
    block = min(p + guard, H.n_g)
    rng = get_random_generator(seed)
    X, _ = modified_gram_schmidt(rng.standard_normal((H.n_g, block)), w)
    values, res = None, None
    for it in range(1, max_iter + 1):
        Y, dependent = modified_gram_schmidt(solver.solve(X), w)
        if dependent:
            raise OracleError(
                f"Block inverse iteration lost rank at iteration {it} "
                f"(columns {dependent})."
            )
        theta, C = sym_eig(gram(Y, H.apply(Y), w))
        X = Y @ C
        values = theta[:p]
        res = residuals(H, X[:, :p], values)
        if verbose >= 4:
            print(f"[ORACLE] iteration {it}: max. residual {np.max(res):.3e}")
        if np.max(res) <= tol:
            return values, X[:, :p], it
    raise OracleError(
        f"Block inverse iteration did not converge in {max_iter} iterations to "
        f"relative residual {tol}. Residuals:\n" + _residual_report(values, res)
    )


def reference_eigenpairs(H, k, mode="auto", solver=None, n_extra=1, guard=None,
                         tol=residual_tol, max_iter=2000, seed=0, check_gap=True,
                         verbose=3):
    """
    Computes the ``k + n_extra`` lowest eigenpairs of ``H`` and returns them as a
    :class:`~orthoflow.diagnostics.ReferencePack` for ``k`` orbitals.

    Parameters
    ----------
    H : HamiltonianOperator
    k : int
        Number of reference orbitals.
    mode : "auto", "dense" or "iterative" (default: "auto")
        ``"auto"`` uses the dense mode for at most 4000 unknowns.
    solver : GreenSolver, optional
        Solver whose factorisation is reused by the iterative mode.
    n_extra : int (default: 1)
        Number of eigenpairs computed beyond ``k`` (at least 1, for ``lambda_{k+1}``).
    guard : int, optional
        Extra block vectors of the iterative mode (default: ``max(8, k + n_extra)``).
    tol : float (default: 1e-8)
        Required relative residual of every eigenpair.
    max_iter : int (default: 2000)
        Iteration budget of the iterative mode.
    seed : int (default: 0)
        Seed of the initial block of the iterative mode.
    check_gap : bool (default: True)
        Reject ``lambda_k = lambda_{k+1}`` (relative tolerance ``1e-6``).
    verbose : int (default: 3)

    Returns
    -------
    ReferencePack

    Raises
    ------
    OracleError
        If some residual exceeds ``tol``, if the dense mode is requested for a too large
        grid, or if ``check_gap`` and the problem is not gapped.
    """
    if mode not in _modes:
        raise ValueError(f"Unknown mode {mode!r}. Use one of {_modes}.")
    if n_extra < 1:
        raise ValueError(f"'n_extra' must be at least 1. Got {n_extra}.")
    p = k + n_extra
    if k < 1 or p > H.n_g:
        raise ValueError(f"Cannot compute {p} eigenpairs on {H.n_g} unknowns.")
    if mode == "auto":
        mode = "dense" if H.n_g <= max_dense_size else "iterative"
    if mode == "dense":
        values, X, n_iter = _dense(H, p)
        n_solves = 0
    else:
        if solver is None:
            solver = GreenSolver(H, verbose=verbose)
        guard = max(8, p) if guard is None else guard
        with TimerCounter(solver) as timer:
            values, X, n_iter = _iterative(
                H, p, solver, guard, tol, max_iter, seed, verbose
            )
        n_solves = timer.solves
    X, dependent = modified_gram_schmidt(np.array(X), H.mass_weight)
    if dependent:
        raise OracleError(f"Reference eigenvectors {dependent} are linearly dependent.")
    res = residuals(H, X, values)
    if np.max(res) > tol:
        raise OracleError(
            f"Reference eigenpairs not accurate to relative residual {tol}. "
            "Residuals:\n" + _residual_report(values, res)
        )
    if check_gap and values[k] - values[k - 1] <= gap_rtol * abs(values[k]):
        raise OracleError(
            f"lambda_{k} = {values[k - 1]:.10g} and lambda_{k + 1} = {values[k]:.10g} "
            "coincide: the lowest invariant subspace is not well defined. Change the "
            "number of orbitals so that it does not split a degenerate cluster."
        )
    if verbose >= 3:
        print(
            f"[ORACLE] {p} reference eigenpairs ({mode} mode"
            + (
                f", {n_iter} iterations, {n_solves} solves" if mode == "iterative"
                else ""
            )
            + f"), max. residual {np.max(res):.2e}."
        )
    if verbose >= 4:
        print(_residual_report(values - H.shift, res))
    return ReferencePack(
        Ustar=OrbitalSet(X[:, :k], H.grid),
        operator_eigenvalues=values,
        shift=H.shift,
        residuals=res,
        extra=OrbitalSet(X[:, k:], H.grid),
    )
