"""
Discrete Hamiltonian ``H = c_lap (-Delta_h) + diag(V) + shift I`` on a tensor grid, the
inner products it induces, the energy functional, and the Green's operator
``G = H^{-1}``.

The finite-difference mass matrix is ``h^d I``, so that

* ``<A, B>   = h^d A^T B``        (L2 inner matrix),
* ``<A, B>_a = h^d A^T H B``      (energy inner matrix),
* ``E(U)     = tr <U, U>_a / 2``,

and one application of ``G`` is one sparse solve ``H w = u`` per column.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import splu, cg, LinearOperator

from orthoflow.grid import TensorGrid, eval_potential, get_potential
from orthoflow.tools import get_n_threads, symmetric_part

#: Number of calls to :func:`modified_gram_schmidt` in this process. Used to check that
#: no re-orthonormalisation happens inside the evolution loop.
orthonormalization_calls = 0

_backends = ("direct", "cg")


class NotPositiveDefiniteError(ArithmeticError):
    """
    Exception raised when the (shifted) Hamiltonian is not positive definite.
    """


class SolverConvergenceError(ArithmeticError):
    """
    Exception raised when the iterative Green's solver does not converge.
    """


def laplacian_1d(m, h):
    """
    Matrix of ``-d^2/dx^2`` with homogeneous Dirichlet conditions: 3-point stencil on
    the ``m - 1`` interior nodes of ``m`` cells of width ``h``.
    """
    n = m - 1
    main = np.full(n, 2.0 / h**2)
    off = np.full(n - 1, -1.0 / h**2)
    return sps.diags([off, main, off], [-1, 0, 1], shape=(n, n), format="csr")


def negative_laplacian(grid):
    """
    ``-Delta_h`` on the interior nodes of ``grid``: Kronecker sum of 1-d 3-point
    stencils, i.e. a 3-, 5- or 7-point stencil in 1, 2 or 3 dimensions.
    """
    mats = [laplacian_1d(m, h) for m, h in zip(grid.cells_per_dim, grid.spacing)]
    eyes = [sps.identity(n, format="csr") for n in grid.shape]
    lap = sps.csr_matrix((grid.n_g, grid.n_g))
    for i, mat in enumerate(mats):
        term = sps.identity(1, format="csr")
        for j in range(grid.dim):
            term = sps.kron(term, mat if i == j else eyes[j], format="csr")
        lap = lap + term
    return lap.tocsr()


class HamiltonianOperator:
    """
    Sparse symmetric matrix of ``c_lap (-Delta) + V + shift`` on the interior nodes of a
    grid. Use :func:`assemble` to create one.

    Read-only after assembly: it can be shared between threads.

    Attributes
    ----------
    grid : TensorGrid
    matrix : scipy.sparse.csr_matrix
    c_lap : float
        Coefficient of the negative Laplacian.
    shift : float
        Spectral shift ``sigma >= 0`` added to the diagonal.
    potential_values : numpy.ndarray
        ``V`` at the interior nodes (without shift).
    mass_weight : float
        ``h^d``.
    """

    def __init__(self, grid, matrix, c_lap, shift, potential_values, potential=None):
        self.grid = grid
        self.matrix = matrix
        self.c_lap = float(c_lap)
        self.shift = float(shift)
        self.potential_values = potential_values
        self.potential = potential
        self.mass_weight = grid.mass_weight

    @property
    def n_g(self):
        """Number of unknowns."""
        return self.grid.n_g

    def apply(self, X):
        """Returns ``H X`` for an array or :class:`OrbitalSet` ``X``."""
        return self.matrix @ _as_array(X)

    def asymmetry(self):
        """Largest entry of ``|H - H^T|`` relative to the largest entry of ``|H|``."""
        diff = abs(self.matrix - self.matrix.T)
        return (diff.max() if diff.nnz else 0.0) / abs(self.matrix).max()

    def __repr__(self):
        return (
            f"HamiltonianOperator(n_g={self.n_g}, c_lap={self.c_lap}, "
            f"shift={self.shift}, nnz={self.matrix.nnz})"
        )


def assemble(grid, pot, c_lap=1.0, shift=0.0):
    """
    Assembles the discrete Hamiltonian ``c_lap (-Delta_h) + diag(V) + shift I``.

    Parameters
    ----------
    grid : TensorGrid
    pot : Potential, str or callable
        Potential (see :func:`orthoflow.grid.get_potential`).
    c_lap : float (default: 1)
        Laplacian coefficient (1/2 for Schroedinger operators in atomic units).
    shift : float (default: 0)
        Spectral shift, needed to make indefinite operators positive definite.

    Returns
    -------
    HamiltonianOperator
    """
    if not isinstance(grid, TensorGrid):
        raise TypeError(f"'grid' must be a TensorGrid. Got {type(grid)}.")
    if c_lap <= 0:
        raise ValueError(f"'c_lap' must be positive. Got {c_lap}.")
    if shift < 0:
        raise ValueError(f"'shift' must be non-negative. Got {shift}.")
    pot = get_potential(pot)
    v = eval_potential(grid, pot)
    v.setflags(write=False)
    matrix = c_lap * negative_laplacian(grid) + sps.diags(v + shift, format="csr")
    matrix = matrix.tocsr()
    matrix.sort_indices()
    return HamiltonianOperator(grid, matrix, c_lap, shift, v, potential=pot)


class OrbitalSet:
    """
    Block of ``N`` discrete orbitals on a grid, stored as an ``(n_g, N)`` array.

    Parameters
    ----------
    data : array-like of shape (n_g, N)
        Orbital values at the interior nodes. A 1-d array is taken as a single orbital.
    grid : TensorGrid
    copy : bool (default: True)
        Whether to copy ``data``.
    """

    def __init__(self, data, grid, copy=True):
        data = np.array(data, dtype=float, copy=copy)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] != grid.n_g:
            raise ValueError(
                f"Orbital data must have shape (n_g={grid.n_g}, N). Got {data.shape}."
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("Orbitals contain non-finite values.")
        self.data = data
        self.grid = grid

    @property
    def N(self):
        """Number of orbitals."""
        return self.data.shape[1]

    @property
    def n_g(self):
        """Number of grid nodes."""
        return self.data.shape[0]

    @property
    def mass_weight(self):
        """``h^d`` of the underlying grid."""
        return self.grid.mass_weight

    def column(self, i):
        """Orbital ``i`` as a 1-d array (a view)."""
        return self.data[:, i]

    def copy(self):
        """Returns a deep copy."""
        return OrbitalSet(self.data, self.grid, copy=True)

    def ortho_error(self):
        """``||I_N - <U, U>||_F``."""
        gram = inner_l2(self, self)
        return float(np.linalg.norm(np.eye(self.N) - gram, ord="fro"))

    def is_orthonormal(self, ortho_tol=1e-10):
        """Whether ``||I_N - <U, U>||_F <= ortho_tol``."""
        return self.ortho_error() <= ortho_tol

    def norm(self):
        """L2 block (Frobenius) norm ``sqrt(tr <U, U>)``."""
        return float(np.sqrt(self.mass_weight) * np.linalg.norm(self.data))

    def __repr__(self):
        return f"OrbitalSet(n_g={self.n_g}, N={self.N})"


def _as_array(X):
    return X.data if isinstance(X, OrbitalSet) else np.asarray(X, dtype=float)


def _check_conformable(A, B):
    if not isinstance(A, OrbitalSet) or not isinstance(B, OrbitalSet):
        raise TypeError("Inner products are defined between OrbitalSet instances.")
    if A.grid != B.grid or A.n_g != B.n_g:
        raise ValueError(
            f"Orbital sets live on different grids: {A.grid} and {B.grid}."
        )


def gram(A, B, mass_weight):
    """``h^d A^T B`` for plain arrays."""
    return mass_weight * (A.T @ B)


def inner_l2(A, B):
    """
    L2 inner matrix ``(<A, B>)_ij = h^d sum_k A_ki B_kj``.

    Parameters
    ----------
    A : OrbitalSet of N_A orbitals
    B : OrbitalSet of N_B orbitals on the same grid

    Returns
    -------
    Array of shape ``(N_A, N_B)``.
    """
    _check_conformable(A, B)
    return gram(A.data, B.data, A.mass_weight)


def inner_a(A, B, H):
    """
    Energy inner matrix ``<A, B>_a = h^d A^T H B``.

    Parameters
    ----------
    A, B : OrbitalSet
    H : HamiltonianOperator

    Returns
    -------
    Array of shape ``(N_A, N_B)``.
    """
    _check_conformable(A, B)
    if H.grid != A.grid:
        raise ValueError("The operator and the orbitals live on different grids.")
    return gram(A.data, H.apply(B.data), A.mass_weight)


def energy(U, H, shift_corrected=False):
    """
    Energy ``E(U) = tr <U, U>_a / 2``.

    Parameters
    ----------
    U : OrbitalSet
    H : HamiltonianOperator
    shift_corrected : bool (default: False)
        If True, returns ``E(U) - N shift / 2``, the energy of the unshifted operator
        for L2-orthonormal ``U``.
    """
    value = 0.5 * float(np.trace(inner_a(U, U, H)))
    if shift_corrected:
        value -= 0.5 * U.N * H.shift
    return value


def modified_gram_schmidt(X, mass_weight, rtol=1e-10, passes=2):
    """
    L2-orthonormalises the columns of ``X`` in place with modified Gram-Schmidt.

    Parameters
    ----------
    X : numpy.ndarray of shape (n_g, N)
    mass_weight : float
        ``h^d``.
    rtol : float
        A column whose norm after projection falls below ``rtol`` times its original
        norm is considered linearly dependent.
    passes : int (default: 2)
        Number of full sweeps.

    Returns
    -------
    ``(X, dependent)``: the orthonormalised array, and the indices of dependent columns
    (left unnormalised). ``dependent`` is empty on success.
    """
    global orthonormalization_calls  # pylint: disable=global-statement
    orthonormalization_calls += 1
    dependent = set()
    for _ in range(passes):
        for j in range(X.shape[1]):
            norm_before = np.sqrt(mass_weight) * np.linalg.norm(X[:, j])
            for i in range(j):
                if i in dependent:
                    continue
                X[:, j] -= mass_weight * np.dot(X[:, i], X[:, j]) * X[:, i]
            norm = np.sqrt(mass_weight) * np.linalg.norm(X[:, j])
            if norm <= rtol * norm_before or norm == 0:
                dependent.add(j)
                continue
            X[:, j] /= norm
    return X, sorted(dependent)


class GreenSolver:
    """
    Application of ``G = H^{-1}`` to blocks of columns.

    With the ``"direct"`` backend the sparse LU factorisation of ``H`` (with symmetric,
    diagonal pivoting, i.e. an ``LDL^T`` factorisation) is computed once at
    initialisation and reused for every right-hand side; the signs of its pivots give
    the inertia of ``H``, so that a non-positive-definite operator is detected up front.
    The ``"cg"`` backend runs Jacobi-preconditioned conjugate gradients per column, with
    columns distributed among threads.

    Parameters
    ----------
    H : HamiltonianOperator
    backend : "direct" or "cg" (default: "direct")
    cg_rel_tol : float (default: 1e-12)
        Relative residual tolerance for CG.
    cg_max_iter : int, optional
        Maximum number of CG iterations per column (default: ``10 n_g``).
    n_threads : int, optional
        Worker threads for CG column solves. Capped by ``ORTHO_FLOW_THREADS``.
    verbose : int (default: 3)
        Verbosity level.

    Attributes
    ----------
    n_solves : int
        Number of single-column solves performed so far.
    """

    def __init__(self, H, backend="direct", cg_rel_tol=1e-12, cg_max_iter=None,
                 n_threads=None, verbose=3):
        if backend not in _backends:
            raise ValueError(f"Unknown backend {backend!r}. Use one of {_backends}.")
        if not cg_rel_tol > 0:
            raise ValueError(f"'cg_rel_tol' must be positive. Got {cg_rel_tol}.")
        self.operator = H
        self.backend = backend
        self.cg_rel_tol = float(cg_rel_tol)
        self.cg_max_iter = int(cg_max_iter or 10 * H.n_g)
        self.n_threads = get_n_threads(n_threads)
        self.verbose = verbose
        self.n_solves = 0
        self._lu = None
        self._preconditioner = None
        if self.backend == "direct":
            self._factorize()
        else:
            diag = H.matrix.diagonal()
            if np.any(diag <= 0):
                raise NotPositiveDefiniteError(
                    "The operator has non-positive diagonal entries, so it is not "
                    "positive definite. Try a larger 'shift'."
                )
            inv_diag = 1.0 / diag
            self._preconditioner = LinearOperator(
                H.matrix.shape, matvec=lambda x: inv_diag * x.ravel(), dtype=float
            )

    def _factorize(self):
        csc = self.operator.matrix.tocsc()
        try:
            self._lu = splu(
                csc, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as excpt:
            raise NotPositiveDefiniteError(
                f"Factorization of the operator failed ({excpt}). It is singular or "
                "not positive definite. Try a larger 'shift'."
            ) from excpt
        pivots = self._lu.U.diagonal()
        symmetric_pivoting = np.array_equal(self._lu.perm_r, self._lu.perm_c)
        if not symmetric_pivoting or np.any(pivots <= 0):
            n_neg = int(np.sum(pivots <= 0))
            raise NotPositiveDefiniteError(
                f"The operator is not positive definite ({n_neg} non-positive pivots"
                + ("" if symmetric_pivoting else ", non-symmetric pivoting")
                + f"). Try a larger 'shift' (current: {self.operator.shift})."
            )
        if self.verbose >= 4:
            print(
                f"[GREEN] Factorized operator of size {self.operator.n_g} "
                f"(nnz(L+U) = {self._lu.L.nnz + self._lu.U.nnz})."
            )

    def _cg_column(self, b):
        if not np.any(b):
            return np.zeros_like(b), 0
        x, info = cg(
            self.operator.matrix, b, rtol=self.cg_rel_tol, atol=0.0,
            maxiter=self.cg_max_iter, M=self._preconditioner,
        )
        return x, info

    def solve(self, X):
        """
        Returns ``H^{-1} X`` for a 1-d or 2-d array ``X``, column by column.

        Raises
        ------
        SolverConvergenceError
            If CG does not converge within ``cg_max_iter`` iterations for some column.
        """
        X = np.asarray(X, dtype=float)
        is_vector = X.ndim == 1
        X2 = X[:, None] if is_vector else X
        if self.backend == "direct":
            W = self._lu.solve(np.asfortranarray(X2))
        else:
            columns = [np.ascontiguousarray(X2[:, j]) for j in range(X2.shape[1])]
            n_workers = min(self.n_threads, len(columns))
            if n_workers > 1:
                with ThreadPoolExecutor(max_workers=n_workers) as pool:
                    results = list(pool.map(self._cg_column, columns))
            else:
                results = [self._cg_column(b) for b in columns]
            failed = [j for j, (_, info) in enumerate(results) if info != 0]
            if failed:
                raise SolverConvergenceError(
                    f"CG did not converge to rel. tol. {self.cg_rel_tol} within "
                    f"{self.cg_max_iter} iterations for column(s) {failed}."
                )
            W = np.stack([x for x, _ in results], axis=1)
        self.n_solves += X2.shape[1]
        return W[:, 0] if is_vector else W

    @property
    def tolerance(self):
        """Relative residual guaranteed by the backend (machine epsilon if direct)."""
        return self.cg_rel_tol if self.backend == "cg" else np.finfo(float).eps

    def __repr__(self):
        return f"GreenSolver(backend={self.backend!r}, n_solves={self.n_solves})"


def apply_green(H, solver, U):
    """
    Solves the ``N`` independent source problems ``H w_i = u_i``.

    Parameters
    ----------
    H : HamiltonianOperator
    solver : GreenSolver
        Solver built for ``H``.
    U : OrbitalSet

    Returns
    -------
    OrbitalSet ``W = G U``.
    """
    if solver.operator is not H:
        raise ValueError("The Green's solver was built for a different operator.")
    return OrbitalSet(solver.solve(U.data), U.grid, copy=False)


def green_cross_matrix(W, U, mass_weight):
    """
    Symmetrised ``<W, U>`` for ``W = G U`` (exactly symmetric for exact solves),
    together with the Frobenius norm of the raw asymmetry ``<W, U> - <W, U>^T``.
    """
    raw = gram(W, U, mass_weight)
    return symmetric_part(raw), float(np.linalg.norm(raw - raw.T, ord="fro"))
