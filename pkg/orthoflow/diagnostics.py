"""
Convergence diagnostics: per-iteration records, errors against a final state or a
reference eigenbasis, subspace distances and principal angles, exponential-rate fits,
and an explicit integrator of the continuous flow used for cross-validation.

The continuous flow reads

.. math::

   \\frac{dU}{dt} = -U \\langle GU, U\\rangle + GU \\langle U, U\\rangle = -L_U U,

with :math:`L_U V = U\\langle GU, V\\rangle - GU\\langle U, V\\rangle`.
"""

import warnings
from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np
from scipy.linalg import eigh, LinAlgError
from scipy.stats import linregress

from orthoflow.operator import OrbitalSet, gram, inner_l2, inner_a, energy
from orthoflow.smallmat import svd, procrustes
from orthoflow.tools import NumpyErrorHandling

#: Relative tolerance of the check ``P U = P_a U``.
projection_rtol = 1e-8

#: Block-norm threshold signalling a diverging explicit integration.
blowup_norm = 1e3

#: Largest time step accepted by :func:`integrate_flow_rk4`.
max_rk4_dt = 1e-2

#: Minimum number of positive samples for a rate fit.
min_fit_samples = 10

#: Fraction of the last iterates left out of rate fits of errors against the final
#: iterate.
end_point_skip = 0.1


class DiagnosticsError(ValueError):
    """
    Exception raised when a diagnostic cannot be computed from the given data.
    """


@dataclass
class RunRecord:
    """
    Diagnostics of one iterate ``U^n``.

    Fields that need a final state or a reference eigenbasis are ``nan`` when not
    available. ``err_E`` is ``nan`` for the initial state.
    """

    n: int
    t: float
    energy: float
    energy_shift_corrected: float
    err_E: float
    ortho_err: float
    tau: float = np.nan
    err_U: float = np.nan
    dist_class_a: float = np.nan
    delta_L2: float = np.nan
    delta_H1: float = np.nan
    residual_L: float = np.nan
    perp_norm_a: float = np.nan
    asymmetry: float = np.nan
    time_green: float = np.nan

    def as_dict(self):
        """Returns the record as a plain dict."""
        return asdict(self)


@dataclass
class ReferencePack:
    """
    Reference eigenbasis of the (shifted) operator.

    Parameters
    ----------
    Ustar : OrbitalSet
        L2-orthonormal eigenvectors of the ``N`` smallest eigenvalues.
    operator_eigenvalues : numpy.ndarray
        ``N + n_extra`` smallest eigenvalues of the shifted operator, ascending
        (``n_extra >= 1`` for the gap quantities, which are ``nan`` otherwise).
    shift : float
        Spectral shift of the operator.
    residuals : numpy.ndarray
        Relative residuals ``||H u - lambda u|| / |lambda|`` of every eigenpair.
    extra : OrbitalSet, optional
        Eigenvectors number ``N + 1`` to ``N + n_extra``.
    """

    Ustar: OrbitalSet
    operator_eigenvalues: np.ndarray
    shift: float = 0.0
    residuals: np.ndarray = field(default=None)
    extra: OrbitalSet = field(default=None)

    def __post_init__(self):
        self.operator_eigenvalues = np.asarray(self.operator_eigenvalues, dtype=float)
        if len(self.operator_eigenvalues) < self.N:
            raise DiagnosticsError(
                f"A reference pack for N={self.N} orbitals needs at least N "
                f"eigenvalues. Got {len(self.operator_eigenvalues)}."
            )
        if np.any(np.diff(self.operator_eigenvalues) < 0):
            raise DiagnosticsError("Reference eigenvalues must be sorted ascending.")
        if self.residuals is None:
            self.residuals = np.full(len(self.operator_eigenvalues), np.nan)
        self.residuals = np.asarray(self.residuals, dtype=float)

    @property
    def N(self):
        """Number of reference orbitals."""
        return self.Ustar.N

    @property
    def grid(self):
        """Grid of the reference orbitals."""
        return self.Ustar.grid

    @property
    def Lambda(self):
        """Physical (shift-corrected) eigenvalues ``lambda_1..lambda_N``."""
        return self.operator_eigenvalues[: self.N] - self.shift

    @property
    def lambda_Np1(self):
        """Physical eigenvalue ``lambda_{N+1}`` (``nan`` if not available)."""
        if len(self.operator_eigenvalues) <= self.N:
            return np.nan
        return self.operator_eigenvalues[self.N] - self.shift

    @property
    def E_GS(self):
        """Ground-state energy of the shifted operator, as returned by ``energy``."""
        return 0.5 * float(np.sum(self.operator_eigenvalues[: self.N]))

    @property
    def E_ES(self):
        """First excited energy of the shifted operator."""
        return self.E_GS + 0.5 * float(self.lambda_Np1 - self.Lambda[-1])

    @property
    def E_GS_shift_corrected(self):
        """Ground state energy of the unshifted operator."""
        return self.E_GS - 0.5 * self.N * self.shift

    @property
    def E_ES_shift_corrected(self):
        """First excited energy of the unshifted operator."""
        return self.E_ES - 0.5 * self.N * self.shift

    @property
    def has_gap(self):
        """Whether ``lambda_N < lambda_{N+1}`` (relative tolerance ``1e-6``)."""
        lam = self.operator_eigenvalues
        if len(lam) <= self.N:
            return False
        return lam[self.N] - lam[self.N - 1] > 1e-6 * abs(lam[self.N])

    def ortho_error(self):
        """``||I - <U*, U*>||_F``."""
        return self.Ustar.ortho_error()

    def restricted(self, N):
        """
        Returns a pack for the first ``N`` orbitals, the remaining ones becoming extra.
        """
        if not 1 <= N <= self.N:
            raise DiagnosticsError(
                f"Cannot restrict a reference of {self.N} orbitals to N={N}."
            )
        if N == self.N:
            return self
        data = self.Ustar.data
        extra = data[:, N:]
        if self.extra is not None:
            extra = np.hstack([extra, self.extra.data])
        return ReferencePack(
            Ustar=OrbitalSet(data[:, :N], self.grid),
            operator_eigenvalues=self.operator_eigenvalues,
            shift=self.shift,
            residuals=self.residuals,
            extra=OrbitalSet(extra, self.grid),
        )


class RateFit(NamedTuple):
    """Least-squares fit of ``log(series) ~ intercept + slope * n``."""

    slope: float
    intercept: float
    window: float
    r_squared: float
    n_samples: int


class SubspaceDistances(NamedTuple):
    """Distances between ``span(U)`` (or ``[U]``) and the reference ones."""

    delta_L2: float
    delta_H1: float
    angles: np.ndarray
    dist_class_L2: float
    dist_class_a: float


def a_norm(X, H):
    """Block energy norm ``sqrt(tr <X, X>_a)``."""
    return float(np.sqrt(max(np.trace(inner_a(X, X, H)), 0.0)))


def relative_block_error(U, U_end):
    """``||U - U_end|| / ||U_end||`` in the L2 block norm (no alignment)."""
    return float(np.linalg.norm(U.data - U_end.data) / np.linalg.norm(U_end.data))


def relative_column_errors(U, U_end):
    """``||u_i - u_i^end|| / ||u_i^end||`` for every column ``i``."""
    return np.linalg.norm(U.data - U_end.data, axis=0) / np.linalg.norm(
        U_end.data, axis=0
    )


def _check_history(history, U_end):
    history = list(history)
    if not history:
        raise DiagnosticsError("Empty history: nothing to compare with.")
    for U in history:
        if U.data.shape != U_end.data.shape:
            raise DiagnosticsError(
                f"Shape mismatch between iterate {U.data.shape} and final state "
                f"{U_end.data.shape}."
            )
    return history


def err_U_series(history, U_end):
    """
    Relative errors ``||U^n - U_end|| / ||U_end||`` of a sequence of iterates, without
    any orthogonal alignment.

    Parameters
    ----------
    history : iterable of OrbitalSet
    U_end : OrbitalSet

    Returns
    -------
    numpy.ndarray of one value per iterate.
    """
    history = _check_history(history, U_end)
    return np.array([relative_block_error(U, U_end) for U in history])


def err_U_columns(history, U_end):
    """
    Orbital-wise relative errors ``||u_i^n - u_i^end|| / ||u_i^end||``.

    Returns
    -------
    Array of shape ``(len(history), N)``.
    """
    history = _check_history(history, U_end)
    return np.array([relative_column_errors(U, U_end) for U in history])


def _check_pack(U, pack):
    if U.grid != pack.grid:
        raise DiagnosticsError("Orbitals and reference live on different grids.")


def projections(U, pack):
    """
    L2 projection of ``U`` onto ``span(U*)`` and its complement.

    Returns
    -------
    ``(PU, PperpU)`` with ``PU = U* <U*, U>`` and ``PperpU = U - PU``.
    """
    _check_pack(U, pack)
    coeffs = inner_l2(pack.Ustar, U)
    PU = pack.Ustar.data @ coeffs
    return (
        OrbitalSet(PU, U.grid, copy=False),
        OrbitalSet(U.data - PU, U.grid, copy=False),
    )


def projection_gap(U, pack, H):
    """
    Relative gap ``||P U - P_a U||_a / ||U||_a`` between the L2 and energy projections
    onto ``span(U*)``, with ``P_a U = U* <U*, U*>_a^{-1} <U*, U>_a``.

    It vanishes (up to round-off and oracle accuracy) when ``U*`` spans an invariant
    subspace of ``H``.
    """
    PU, _ = projections(U, pack)
    Ustar = pack.Ustar
    coeffs_a = np.linalg.solve(inner_a(Ustar, Ustar, H), inner_a(Ustar, U, H))
    PaU = OrbitalSet(Ustar.data @ coeffs_a, U.grid, copy=False)
    diff = OrbitalSet(PU.data - PaU.data, U.grid, copy=False)
    norm_U = a_norm(U, H)
    return a_norm(diff, H) / norm_U if norm_U > 0 else 0.0


def check_projections(U, pack, H, rtol=projection_rtol):
    """
    Warns if ``P U`` and ``P_a U`` differ by more than ``rtol`` relative.
    Returns the gap.
    """
    gap = projection_gap(U, pack, H)
    if gap > rtol:
        warnings.warn(
            f"L2 and energy projections onto the reference span differ by {gap:.3g} "
            f"(relative, > {rtol}): the reference is not an invariant subspace to the "
            "required accuracy."
        )
    return gap


def principal_angles(U, pack):
    """
    Principal angles between ``span(U)`` and ``span(U*)``, ascending.

    Cosines are the singular values of ``<U*, U>``, sines those of the complement
    ``P_perp U``; both are combined so that small and large angles are accurate.
    """
    _check_pack(U, pack)
    _, cosines, _ = svd(inner_l2(pack.Ustar, U))
    _, PperpU = projections(U, pack)
    _, sines, _ = svd(np.sqrt(U.mass_weight) * PperpU.data)
    cosines = np.clip(cosines, 0.0, 1.0)
    sines = np.clip(np.sort(sines), 0.0, 1.0)
    return np.sort(np.arctan2(sines, cosines))


def subspace_distances(U, pack, H=None):
    """
    Distances between ``U`` and the reference eigenbasis ``U*``, both L2-orthonormal.

    Parameters
    ----------
    U : OrbitalSet
    pack : ReferencePack
    H : HamiltonianOperator, optional
        Needed for the energy-norm quantities ``delta_H1`` and ``dist_class_a``
        (``nan`` otherwise).

    Returns
    -------
    SubspaceDistances
        ``delta_L2`` (sine of the largest principal angle), ``delta_H1`` (largest
        relative energy-norm distance of a vector of ``span(U)`` to ``span(U*)``), the
        principal ``angles``, and the distances between equivalence classes
        ``min_Q ||U - U* Q||`` in the L2 and energy norms.

    Notes
    -----
    The energy-class distance uses the rotation that is optimal for the energy cross
    matrix ``<U*, U>_a``; it is exact when ``U*`` is orthonormal in the energy inner
    product up to a diagonal scaling, which is the case for a reference eigenbasis only
    up to the spread of its eigenvalues. It vanishes exactly when ``[U] = [U*]``.
    """
    if U.N != pack.N:
        raise DiagnosticsError(
            f"Number of orbitals differs: {U.N} vs {pack.N} in the reference."
        )
    angles = principal_angles(U, pack)
    delta_L2 = float(np.sin(angles[-1]))
    Ustar = pack.Ustar
    Q = procrustes(inner_l2(Ustar, U))
    dist_class_L2 = float(
        np.sqrt(U.mass_weight) * np.linalg.norm(U.data - Ustar.data @ Q)
    )
    delta_H1, dist_class_a = np.nan, np.nan
    if H is not None:
        _, PperpU = projections(U, pack)
        num = inner_a(PperpU, PperpU, H)
        den = inner_a(U, U, H)
        try:
            ratios = eigh(0.5 * (num + num.T), 0.5 * (den + den.T), eigvals_only=True)
        except LinAlgError as excpt:
            raise DiagnosticsError(
                f"Could not compute the energy-norm subspace distance: {excpt}"
            ) from excpt
        delta_H1 = float(np.sqrt(max(ratios[-1], 0.0)))
        Q_a = procrustes(inner_a(Ustar, U, H))
        diff = OrbitalSet(U.data - Ustar.data @ Q_a, U.grid, copy=False)
        dist_class_a = a_norm(diff, H)
    return SubspaceDistances(delta_L2, delta_H1, angles, dist_class_L2, dist_class_a)


def fit_rate(series, window=0.5, n=None, min_samples=min_fit_samples, skip_last=0.0):
    """
    Fits ``log(series) ~ intercept + slope * n`` on the last ``window`` fraction of
    samples, using only strictly positive finite values.

    Errors measured against the final iterate (``err_U``) collapse over the last
    iterates, where the distance of ``U_end`` to the limit dominates; ``skip_last``
    leaves that stretch out of the fit.

    Parameters
    ----------
    series : array-like
        Metric values, one per iteration.
    window : float in (0, 1] (default: 0.5)
        Fraction of the samples (the last ones) used for the fit.
    n : array-like, optional
        Iteration indices (default: ``0, 1, ...``).
    min_samples : int (default: 10)
        Minimum number of usable samples.
    skip_last : float in [0, window) (default: 0)
        Fraction of all the samples (the very last ones) excluded from the fit.

    Returns
    -------
    RateFit
    """
    series = np.asarray(series, dtype=float)
    if not 0 < window <= 1:
        raise ValueError(f"'window' must be in (0, 1]. Got {window}.")
    if not 0 <= skip_last < window:
        raise ValueError(f"'skip_last' must be in [0, window). Got {skip_last}.")
    n = np.arange(len(series), dtype=float) if n is None else np.asarray(n, float)
    if len(n) != len(series):
        raise ValueError("'n' and 'series' have different lengths.")
    start = len(series) - int(np.ceil(window * len(series)))
    stop = len(series) - int(np.floor(skip_last * len(series)))
    x, y = n[start:stop], series[start:stop]
    usable = np.isfinite(y) & (y > 0)
    x, y = x[usable], y[usable]
    if len(y) < min_samples:
        raise DiagnosticsError(
            f"Not enough positive samples for a rate fit: {len(y)} < {min_samples}."
        )
    with NumpyErrorHandling(all="ignore"):
        logy = np.log(y)
    if np.ptp(logy) == 0:
        return RateFit(0.0, float(logy[0]), window, 1.0, len(y))
    result = linregress(x, logy)
    return RateFit(
        float(result.slope), float(result.intercept), window, float(result.rvalue**2),
        len(y),
    )


def apply_L(U, V, solver, W=None):
    """
    Applies ``L_U V = U <GU, V> - GU <U, V>``.

    Parameters
    ----------
    U, V : OrbitalSet
    solver : GreenSolver
    W : numpy.ndarray, optional
        Precomputed ``G U``.
    """
    if W is None:
        W = solver.solve(U.data)
    w = U.mass_weight
    data = U.data @ gram(W, V.data, w) - W @ gram(U.data, V.data, w)
    return OrbitalSet(data, U.grid, copy=False)


def flow_residual(U, W, S_GU, H):
    """
    Energy norm of ``L_U U = U <GU, U> - GU <U, U>`` given ``W = GU`` and
    ``S_GU = <GU, U>``. Vanishes at eigenbases.
    """
    data = U.data @ S_GU - W @ gram(U.data, U.data, U.mass_weight)
    return a_norm(OrbitalSet(data, U.grid, copy=False), H)


def integrate_flow_rk4(U0, H, solver, dt, T, ortho_tol=1e-10, verbose=3):
    """
    Integrates the continuous flow ``dU/dt = -L_U U`` with the classical 4-stage
    Runge-Kutta method up to time ``T``.

    Unlike the midpoint scheme, this does not preserve orthonormality exactly: the drift
    is expected to scale as ``dt^4``.

    Parameters
    ----------
    U0 : OrbitalSet
        L2-orthonormal initial state.
    H : HamiltonianOperator
    solver : GreenSolver
    dt : float
        Time step, at most ``1e-2``. Adjusted down so that ``T / dt`` is an integer.
    T : float
        Final time (``>= 0``).
    ortho_tol : float (default: 1e-10)
        Tolerance for the orthonormality of ``U0``.

    Returns
    -------
    OrbitalSet ``U(T)``.

    Raises
    ------
    DiagnosticsError
        If the block norm of the solution exceeds ``1e3``.
    """
    if not 0 < dt <= max_rk4_dt:
        raise ValueError(f"'dt' must be in (0, {max_rk4_dt}]. Got {dt}.")
    if T < 0:
        raise ValueError(f"'T' must be non-negative. Got {T}.")
    if not U0.is_orthonormal(ortho_tol):
        raise ValueError(
            f"Initial state is not orthonormal: ||I - <U0, U0>|| = "
            f"{U0.ortho_error():.3g}."
        )
    if T == 0:
        return U0.copy()
    n_steps = int(np.ceil(T / dt - 1e-12))
    h = T / n_steps
    w = U0.mass_weight

    def rhs(X):
        GX = solver.solve(X)
        return -X @ gram(GX, X, w) + GX @ gram(X, X, w)

    X = U0.data.copy()
    for i in range(n_steps):
        k1 = rhs(X)
        k2 = rhs(X + 0.5 * h * k1)
        k3 = rhs(X + 0.5 * h * k2)
        k4 = rhs(X + h * k3)
        X = X + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        norm = np.sqrt(w) * np.linalg.norm(X)
        if not np.isfinite(norm) or norm > blowup_norm:
            raise DiagnosticsError(
                f"Explicit integration blew up at t = {(i + 1) * h:.4g} "
                f"(block norm {norm:.3g}). Reduce 'dt'."
            )
    result = OrbitalSet(X, U0.grid, copy=False)
    if verbose >= 4:
        print(
            f"[FLOW] RK4: {n_steps} steps of {h:.3g} up to T={T}: "
            f"E = {energy(result, H):.12g}, ortho. err. = {result.ortho_error():.3g}"
        )
    return result


def contraction_ratios(perp_norms, transient=0.2):
    """
    Ratios ``||P_perp U^{n+1}||_a / ||P_perp U^n||_a`` and their supremum past the
    initial ``transient`` fraction of iterations.

    Returns
    -------
    ``(ratios, omega)``. ``omega`` is ``nan`` if no ratio is available past the
    transient.
    """
    perp_norms = np.asarray(perp_norms, dtype=float)
    if not 0 <= transient < 1:
        raise ValueError(f"'transient' must be in [0, 1). Got {transient}.")
    with NumpyErrorHandling(all="ignore"):
        ratios = perp_norms[1:] / perp_norms[:-1]
    tail = ratios[int(np.floor(transient * len(ratios))):]
    tail = tail[np.isfinite(tail)]
    return ratios, (float(np.max(tail)) if len(tail) else np.nan)


def perp_norm_a(U, pack, H):
    """``||P_perp U||_a``."""
    return a_norm(projections(U, pack)[1], H)


def continuous_rate(pack):
    """
    Asymptotic rate ``2 (1/lambda_N - 1/lambda_{N+1})`` of the energy error of the
    continuous flow on the shifted operator (per unit time).
    """
    if not np.isfinite(pack.lambda_Np1):
        return np.nan
    lam = pack.operator_eigenvalues
    return 2 * (1 / lam[pack.N - 1] - 1 / lam[pack.N])

