"""
Orthogonality-preserving evolution towards the lowest invariant subspace of ``H``.

One step of size ``tau`` from an L2-orthonormal ``U`` (with ``W = G U``) reads

1. ``W = G U`` (``N`` independent sparse solves, cached from the previous step),
2. ``B = M^{-1}`` with ``M = I + tau^2/4 (<W, W> - S S)`` and ``S = sym(<W, U>)``,
3. ``A = (2/tau) (I - B) + S B``,
4. ``U <- U - tau U A + tau W B``,

which keeps ``<U, U> = I`` without any re-orthonormalisation and makes the energy
``E(U) = tr <U, U>_a / 2`` non-increasing.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from tqdm import tqdm

from orthoflow import operator as hamiltonian
from orthoflow.operator import (
    OrbitalSet, gram, green_cross_matrix, modified_gram_schmidt,
)
from orthoflow.smallmat import chol_solve, sym_eig, SmallMatrixError
from orthoflow.diagnostics import RunRecord, flow_residual
from orthoflow.progress import Timer
from orthoflow.tools import get_random_generator, frobenius_offset_from_identity

#: Number of draws attempted by :func:`random_orthonormal_init`.
max_init_draws = 3


class FlowError(ArithmeticError):
    """
    Exception raised when the evolution cannot proceed: failure of the Cholesky
    factorisation of the step matrix, non-positive Green's eigenvalues, or an
    orthonormalisation inside the iteration loop.
    """


class OrthogonalityAlarm(ArithmeticError):
    """
    Exception raised when the orthogonality drift of an iterate exceeds the alarm
    threshold.
    """


@dataclass
class FlowConfig:
    """
    Parameters of the evolution.

    Parameters
    ----------
    N : int
        Number of orbitals.
    tau : float (default: 0.05)
        Time step.
    tol : float (default: 1e-10)
        Stopping tolerance on the relative energy change ``err_E``.
    max_iter : int (default: 100000)
        Maximum number of steps.
    seed : int, optional
        Seed for the random initial state.
    ortho_alarm : float (default: 1e-8)
        Largest accepted ``||I - <U, U>||_F``.
    tau_min, tau_max : float, optional
        Admissible time-step range (default: ``tau``).
    energy_floor : float (default: 1e-14)
        Floor of ``|E|`` in the denominator of ``err_E``.
    energy_rtol : float (default: 1e-12)
        Slack of the energy monotonicity check.
    """

    N: int
    tau: float = 0.05
    tol: float = 1e-10
    max_iter: int = 100000
    seed: Optional[int] = None
    ortho_alarm: float = 1e-8
    tau_min: Optional[float] = None
    tau_max: Optional[float] = None
    energy_floor: float = 1e-14
    energy_rtol: float = 1e-12

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"'N' must be a positive integer. Got {self.N}.")
        if self.tau_min is None:
            self.tau_min = self.tau
        if self.tau_max is None:
            self.tau_max = self.tau
        if not 0 < self.tau_min <= self.tau <= self.tau_max:
            raise ValueError(
                "Time step bounds must satisfy 0 < tau_min <= tau <= tau_max. Got "
                f"tau_min={self.tau_min}, tau={self.tau}, tau_max={self.tau_max}."
            )
        if not self.tol > 0:
            raise ValueError(f"'tol' must be positive. Got {self.tol}.")
        if self.max_iter < 1:
            raise ValueError(f"'max_iter' must be positive. Got {self.max_iter}.")
        if not self.ortho_alarm > 0:
            raise ValueError(f"'ortho_alarm' must be positive. Got {self.ortho_alarm}.")

    def schedule(self, n):
        """Time step of step number ``n`` (constant)."""
        return self.tau

    def check_tau(self, tau):
        """Raises ValueError if ``tau`` is outside ``[tau_min, tau_max]``."""
        if not self.tau_min <= tau <= self.tau_max:
            raise ValueError(
                f"Time step {tau} outside [{self.tau_min}, {self.tau_max}]."
            )
        return tau


@dataclass
class FlowState:
    """
    Iterate ``U^n`` of the evolution together with its cached Green's image and
    diagnostics.

    Attributes
    ----------
    n : int
        Iteration index.
    t : float
        Accumulated time.
    U : OrbitalSet
    W : OrbitalSet
        ``G U``.
    S_GU : numpy.ndarray
        Symmetrised ``<W, U>``.
    energy : float
        ``E(U)`` of the shifted operator.
    energy_shift_corrected : float
    err_E : float
        Relative energy change of the last step (``nan`` at ``n = 0``).
    ortho_err : float
        ``||I - <U, U>||_F``.
    asymmetry : float
        ``||<W, U> - <W, U>^T||_F``.
    energy_increase : float
        Energy increase of the last step beyond the monotonicity slack (0 if none).
    floor_active : bool
        Whether the energy floor was used in the denominator of ``err_E``.
    converged : bool
    history : list of RunRecord
    """

    n: int
    t: float
    U: OrbitalSet
    W: OrbitalSet
    S_GU: np.ndarray
    energy: float
    energy_shift_corrected: float
    err_E: float
    ortho_err: float
    asymmetry: float = 0.0
    energy_increase: float = 0.0
    floor_active: bool = False
    converged: bool = False
    tau: float = np.nan
    residual_L: float = np.nan
    time_green: float = np.nan
    history: list = field(default_factory=list, repr=False)

    def record(self):
        """Returns the :class:`RunRecord` of this iterate."""
        return RunRecord(
            n=self.n,
            t=self.t,
            tau=self.tau,
            energy=self.energy,
            energy_shift_corrected=self.energy_shift_corrected,
            err_E=self.err_E,
            ortho_err=self.ortho_err,
            residual_L=self.residual_L,
            asymmetry=self.asymmetry,
            time_green=self.time_green,
        )


def random_orthonormal_init(grid, N, seed=None):
    """
    Random L2-orthonormal initial state: standard normal entries, orthonormalised with
    modified Gram-Schmidt.

    Parameters
    ----------
    grid : TensorGrid
    N : int
        Number of orbitals (at most ``n_g``).
    seed : int or numpy.random.Generator, optional

    Returns
    -------
    OrbitalSet
    """
    if not 1 <= N <= grid.n_g:
        raise ValueError(f"Need 1 <= N <= n_g = {grid.n_g}. Got N={N}.")
    rng = get_random_generator(seed)
    for _ in range(max_init_draws):
        X = rng.standard_normal((grid.n_g, N))
        X, dependent = modified_gram_schmidt(X, grid.mass_weight, passes=2)
        if not dependent:
            return OrbitalSet(X, grid, copy=False)
    raise FlowError(
        f"Could not draw {N} linearly independent orbitals in {max_init_draws} "
        "attempts."
    )


def _energies(U, H):
    HU = H.apply(U.data)
    raw = 0.5 * float(np.sum(U.data * HU)) * U.mass_weight
    return raw, raw - 0.5 * U.N * H.shift


def _green(U, solver):
    with Timer() as timer:
        W = OrbitalSet(solver.solve(U.data), U.grid, copy=False)
    return W, timer.time


def initial_state(U0, H, solver, ortho_tol=1e-10, track_residual=True):
    """
    Builds the state at ``n = 0`` from an L2-orthonormal ``U0``.
    """
    if U0.grid != H.grid:
        raise ValueError("Initial orbitals and operator live on different grids.")
    ortho_err = U0.ortho_error()
    if ortho_err > ortho_tol:
        raise ValueError(
            f"Initial state is not orthonormal: ||I - <U0, U0>||_F = {ortho_err:.3g}."
        )
    W, time_green = _green(U0, solver)
    S_GU, asym = green_cross_matrix(W.data, U0.data, U0.mass_weight)
    E, E_corrected = _energies(U0, H)
    state = FlowState(
        n=0, t=0.0, U=U0, W=W, S_GU=S_GU, energy=E, energy_shift_corrected=E_corrected,
        err_E=np.nan, ortho_err=ortho_err, asymmetry=asym, time_green=time_green,
    )
    if track_residual:
        state.residual_L = flow_residual(U0, W.data, S_GU, H)
    state.history.append(state.record())
    return state


def step_matrices(S_GG, S_GU, tau):
    """
    Returns ``(A, B)`` of one step from ``<W, W>`` and ``sym(<W, U>)``.

    ``(2/tau) (I - B)`` is evaluated as ``(tau/2) B D`` with ``D = S_GG - S_GU^2``
    (same value, no cancellation for small ``tau``).
    """
    N = S_GU.shape[0]
    D = S_GG - S_GU @ S_GU
    M = np.eye(N) + (tau**2 / 4) * D
    try:
        B = chol_solve(M, np.eye(N))
    except SmallMatrixError as excpt:
        raise FlowError(
            f"Step matrix is not positive definite for tau={tau}: {excpt} This cannot "
            "happen for an orthonormal iterate; check the solver accuracy."
        ) from excpt
    A = (tau / 2) * B @ D + S_GU @ B
    return A, B


def step(state, tau, H, solver, config=None, track_residual=True):
    """
    Performs one step of the orthogonality-preserving scheme.

    Parameters
    ----------
    state : FlowState
        Current iterate (its cached ``W = G U`` is used).
    tau : float
        Time step.
    H : HamiltonianOperator
    solver : GreenSolver
    config : FlowConfig, optional
        Used for the time-step bounds, the orthogonality alarm and the energy floor.
    track_residual : bool (default: True)
        Whether to compute ``||L_U U||_a`` for the new iterate.

    Returns
    -------
    FlowState
        The new iterate, sharing the history list of ``state`` (the new record is
        appended to it).

    Raises
    ------
    OrthogonalityAlarm
        If the new iterate drifts from orthonormality beyond ``config.ortho_alarm``.
    FlowError
        If the step matrix cannot be factorised.
    """
    if config is not None:
        config.check_tau(tau)
    elif not tau > 0:
        raise ValueError(f"'tau' must be positive. Got {tau}.")
    w = state.U.mass_weight
    U, W = state.U.data, state.W.data
    A, B = step_matrices(gram(W, W, w), state.S_GU, tau)
    U_new = OrbitalSet(U - tau * U @ A + tau * W @ B, state.U.grid, copy=False)
    W_new, time_green = _green(U_new, solver)
    S_GU, asym = green_cross_matrix(W_new.data, U_new.data, w)
    E, E_corrected = _energies(U_new, H)
    floor = config.energy_floor if config is not None else 1e-14
    denominator = max(abs(state.energy), floor)
    err_E = abs(E - state.energy) / denominator
    slack = (config.energy_rtol if config is not None else 1e-12) * abs(state.energy)
    ortho_err = frobenius_offset_from_identity(gram(U_new.data, U_new.data, w))
    new_state = replace(
        state, n=state.n + 1, t=state.t + tau, U=U_new, W=W_new, S_GU=S_GU, energy=E,
        energy_shift_corrected=E_corrected, err_E=err_E, ortho_err=ortho_err,
        asymmetry=asym, energy_increase=max(E - state.energy - slack, 0.0),
        floor_active=abs(state.energy) < floor, converged=False, tau=tau,
        time_green=time_green, residual_L=np.nan,
    )
    if track_residual:
        new_state.residual_L = flow_residual(U_new, W_new.data, S_GU, H)
    new_state.history.append(new_state.record())
    alarm = config.ortho_alarm if config is not None else np.inf
    if ortho_err > alarm:
        raise OrthogonalityAlarm(
            f"Orthogonality error {ortho_err:.3g} > {alarm:.3g} at step {new_state.n} "
            f"(asymmetry of <GU, U>: {asym:.3g}, solver tolerance "
            f"{solver.tolerance:.3g}). Tighten the Green's solver tolerance."
        )
    return new_state


def iterate(config, H, solver, U0=None, state=None, track_residual=True):
    """
    Generator of the iterates of the evolution, starting with the initial state.

    Stops after the first iterate with ``err_E <= config.tol`` (flagged as converged)
    or after ``config.max_iter`` steps.

    Parameters
    ----------
    config : FlowConfig
    H : HamiltonianOperator
    solver : GreenSolver
    U0 : OrbitalSet, optional
        Initial state (default: random with ``config.seed``).
    state : FlowState, optional
        State to resume from (``U0`` is then ignored and the state is not yielded).
    """
    if state is None:
        if U0 is None:
            U0 = random_orthonormal_init(H.grid, config.N, config.seed)
        if U0.N != config.N:
            raise ValueError(f"Initial state has {U0.N} orbitals, expected {config.N}.")
        state = initial_state(U0, H, solver, track_residual=track_residual)
        yield state
    while state.n < config.max_iter and not state.converged:
        state = step(
            state, config.check_tau(config.schedule(state.n)), H, solver, config=config,
            track_residual=track_residual,
        )
        state.converged = bool(state.err_E <= config.tol)
        yield state


def run(config, H, solver, U0=None, state=None, callback=None, progress_bar=False,
        verbose=3):
    """
    Runs the evolution until the relative energy change falls below ``config.tol`` or
    ``config.max_iter`` steps are taken.

    Parameters
    ----------
    config : FlowConfig
    H : HamiltonianOperator
    solver : GreenSolver
    U0 : OrbitalSet, optional
        Initial state (default: random with ``config.seed``).
    state : FlowState, optional
        State to resume from.
    callback : callable, optional
        Called with each new state (including the initial one).
    progress_bar : bool (default: False)
        Show a ``tqdm`` progress bar.
    verbose : int (default: 3)

    Returns
    -------
    ``(final_state, records)``: the final :class:`FlowState` (``converged`` tells
    whether the tolerance was reached) and its list of :class:`RunRecord`.
    """
    if state is None and U0 is None:
        U0 = random_orthonormal_init(H.grid, config.N, config.seed)
    calls_before = hamiltonian.orthonormalization_calls
    bar = None
    if progress_bar and verbose >= 3:
        bar = tqdm(total=config.max_iter, desc="[FLOW] iterations")
    warned_floor = False
    final = state
    try:
        for current in iterate(config, H, solver, U0=U0, state=state):
            final = current
            if bar is not None:
                bar.n = current.n
                bar.set_postfix(err_E=f"{current.err_E:.2e}", refresh=False)
                bar.update(0)
            if current.energy_increase > 0 and verbose >= 2:
                print(
                    "[FLOW] *WARNING* Energy increased by "
                    f"{current.energy_increase:.3g} beyond tolerance at step "
                    f"{current.n}. Consider a smaller 'tau'."
                )
            if current.floor_active and not warned_floor and verbose >= 3:
                print(
                    f"[FLOW] |E| below {config.energy_floor}: using it as the "
                    "denominator of the relative energy error."
                )
                warned_floor = True
            if verbose >= 4:
                print(
                    f"[FLOW] n={current.n} E={current.energy:.15g} "
                    f"err_E={current.err_E:.3e} ortho_err={current.ortho_err:.3e} "
                    f"asym={current.asymmetry:.2e}"
                )
            if callback is not None:
                callback(current)
    finally:
        if bar is not None:
            bar.close()
    if hamiltonian.orthonormalization_calls != calls_before:
        raise FlowError(
            "Re-orthonormalisation happened inside the evolution loop "
            f"({hamiltonian.orthonormalization_calls - calls_before} calls)."
        )
    if verbose >= 3:
        status = "converged" if final.converged else "did NOT converge"
        print(
            f"[CONVERGENCE] Evolution {status} after {final.n} steps "
            f"(err_E = {final.err_E:.3e}, tol = {config.tol:.1e})."
        )
    return final, final.history


def extract_eigenvalues(U_end, H, solver, shift=None, return_vectors=False, W=None):
    """
    Eigenvalue approximations ``lambda = 1/mu - shift`` from the eigenvalues ``mu`` of
    ``sym(<G U_end, U_end>)``, ascending.

    Parameters
    ----------
    U_end : OrbitalSet
        L2-orthonormal final state.
    H : HamiltonianOperator
    solver : GreenSolver
    shift : float, optional
        Shift to subtract (default: ``H.shift``).
    return_vectors : bool (default: False)
        Also return the corresponding approximate eigenvectors ``U_end @ V`` as an
        :class:`OrbitalSet`.
    W : array, optional
        Precomputed ``G U_end``.

    Raises
    ------
    FlowError
        If some ``mu <= 0``.
    """
    shift = H.shift if shift is None else shift
    if W is None:
        W = solver.solve(U_end.data)
    S, _ = green_cross_matrix(np.asarray(getattr(W, "data", W)), U_end.data,
                              U_end.mass_weight)
    mu, vectors = sym_eig(S)
    if np.any(mu <= 0):
        raise FlowError(
            f"Non-positive eigenvalue(s) {mu[mu <= 0]} of <GU, U>: the operator is not "
            f"positive definite under shift {shift}."
        )
    # ascending lambda = descending mu
    order = np.argsort(1 / mu)
    lam = 1 / mu[order] - shift
    if return_vectors:
        vectors = OrbitalSet(U_end.data @ vectors[:, order], U_end.grid, copy=False)
        return lam, vectors
    return lam
