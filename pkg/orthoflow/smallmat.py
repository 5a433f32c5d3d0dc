"""
Dense kernels for the small ``N x N`` matrices of the scheme and the diagnostics.

All functions are thin, checked wrappers around LAPACK drivers exposed by
:mod:`scipy.linalg`.
"""

import warnings

import numpy as np
from scipy.linalg import eigh, cho_factor, cho_solve, svd as _svd, LinAlgError

#: Relative asymmetry above which :func:`sym_eig` refuses its input.
sym_rtol = 1e-8


class SmallMatrixError(ArithmeticError):
    """
    Exception raised when a small dense matrix does not have the required structure
    (symmetry, positive-definiteness) or a LAPACK driver does not converge.
    """


def _check_finite(S, name="matrix"):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if not np.all(np.isfinite(S)):
        raise SmallMatrixError(f"The {name} contains non-finite entries.")
    return S


def sym_eig(S):
    """
    Eigendecomposition of a symmetric matrix.

    The input is symmetrised before decomposition; an asymmetry larger than
    ``1e-8 ||S||`` is considered an error.

    Returns
    -------
    ``(eigenvalues, eigenvectors)``, eigenvalues in ascending order, eigenvectors as
    orthonormal columns.
    """
    S = _check_finite(S)
    if S.shape[0] != S.shape[1]:
        raise SmallMatrixError(f"Expected a square matrix. Got shape {S.shape}.")
    scale = np.linalg.norm(S)
    asym = np.linalg.norm(S - S.T)
    if asym > sym_rtol * max(scale, np.finfo(float).tiny):
        raise SmallMatrixError(
            f"Matrix is not symmetric: ||S - S^T|| = {asym:.3g} for "
            f"||S|| = {scale:.3g}."
        )
    try:
        values, vectors = eigh(0.5 * (S + S.T))
    except LinAlgError as excpt:
        raise SmallMatrixError(
            f"Eigendecomposition did not converge: {excpt}"
        ) from excpt
    return values, vectors


def chol_solve(M, RHS):
    """
    Solves ``M X = RHS`` for symmetric positive definite ``M`` via Cholesky.

    Raises
    ------
    SmallMatrixError
        If ``M`` is not positive definite.
    """
    M = _check_finite(M)
    RHS = np.asarray(RHS, dtype=float)
    try:
        factor = cho_factor(0.5 * (M + M.T), lower=True, check_finite=False)
    except LinAlgError as excpt:
        raise SmallMatrixError(
            f"Matrix is not positive definite (Cholesky failed: {excpt})."
        ) from excpt
    return cho_solve(factor, RHS, check_finite=False)


def svd(S):
    """
    Thin singular value decomposition ``S = left @ diag(sigma) @ right.T``.

    Returns
    -------
    ``(left, sigma, right)`` with singular values in descending order. Notice that
    ``right`` holds the right singular vectors as *columns*.
    """
    S = _check_finite(S)
    try:
        left, sigma, right_t = _svd(S, full_matrices=False, lapack_driver="gesdd")
    except LinAlgError:
        try:
            left, sigma, right_t = _svd(S, full_matrices=False, lapack_driver="gesvd")
        except LinAlgError as excpt:
            raise SmallMatrixError(f"SVD did not converge: {excpt}") from excpt
    return left, sigma, right_t.T


def procrustes(Sab, rank_rtol=1e-12):
    """
    Orthogonal matrix ``Q`` maximising ``tr(Q^T Sab)``.

    For ``Sab = <V, U>`` this is the rotation of ``V`` closest to ``U``, i.e. the
    minimiser of ``||U - V Q||`` over orthogonal ``Q``: the orthogonal polar factor
    ``left @ right.T`` of ``Sab``.

    If ``Sab`` is (numerically) rank-deficient, the minimiser is not unique; a valid one
    is still returned and a warning is issued.
    """
    left, sigma, right = svd(Sab)
    if sigma.size and sigma[-1] <= rank_rtol * max(sigma[0], np.finfo(float).tiny):
        warnings.warn(
            "Rank-deficient cross matrix in Procrustes alignment: the optimal rotation "
            f"is not unique (smallest/largest singular value {sigma[-1]:.3g}/"
            f"{sigma[0]:.3g})."
        )
    return left @ right.T


def frobenius_norm(M):
    """Frobenius norm of a dense matrix."""
    return float(np.linalg.norm(M, ord="fro"))


def trace(M):
    """Trace of a square matrix."""
    return float(np.trace(M))
