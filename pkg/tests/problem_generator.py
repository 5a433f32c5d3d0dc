"""
Contains a number of small test problems and builds the discrete operator and its
Green's solver for them, to be used within test scripts.
"""

from abc import ABCMeta, abstractmethod

import numpy as np
from numpy.random import default_rng

from orthoflow.grid import Box, build_grid, harmonic, constant, custom
from orthoflow.operator import assemble, GreenSolver


class Problem_generator(metaclass=ABCMeta):
    """
    Base class for a problem generator that all the other generators inherit from.
    """

    c_lap = 0.5
    shift = 0.0

    @abstractmethod
    def get_grid(self):
        """Returns the TensorGrid of the problem."""

    @abstractmethod
    def get_potential(self):
        """Returns the Potential of the problem."""

    def get_operator(self):
        """Returns the assembled HamiltonianOperator."""
        return assemble(
            self.get_grid(), self.get_potential(), c_lap=self.c_lap, shift=self.shift
        )

    def get_problem(self, backend="direct", **kwargs):
        """Returns ``(H, solver)``."""
        H = self.get_operator()
        return H, GreenSolver(H, backend=backend, verbose=1, **kwargs)


class Oscillator(Problem_generator):
    """
    Harmonic oscillator ``-1/2 Delta + |x|^2 / 2`` on a symmetric box.
    """

    def __init__(self, dim=1, half_width=8.0, cells=128, omega=1.0):
        self.dim = dim
        self.half_width = half_width
        self.cells = cells
        self.omega = omega

    def get_grid(self):
        return build_grid(
            Box([-self.half_width] * self.dim, [self.half_width] * self.dim), self.cells
        )

    def get_potential(self):
        return harmonic(self.omega)


class Particle_in_box(Problem_generator):
    """
    ``-c Delta`` on ``(0, L)^d``, whose discrete spectrum is known in closed form.
    """

    def __init__(self, dim=1, length=1.0, cells=32, c_lap=1.0, shift=0.0):
        self.dim = dim
        self.length = length
        self.cells = cells
        self.c_lap = c_lap
        self.shift = shift

    def get_grid(self):
        return build_grid(Box([0.0] * self.dim, [self.length] * self.dim), self.cells)

    def get_potential(self):
        return constant(0.0)

    def discrete_eigenvalues(self, k):
        """``k`` smallest eigenvalues of the finite-difference operator."""
        m, h = self.cells, self.length / self.cells
        one_d = 4 * self.c_lap / h**2 * np.sin(np.arange(1, m) * np.pi / (2 * m)) ** 2
        values = one_d
        for _ in range(self.dim - 1):
            values = np.add.outer(values, one_d).ravel()
        return np.sort(values)[:k] + self.shift


class Random_smooth_1d(Problem_generator):
    """
    1-d problem with a random smooth non-negative potential: a sum of a few cosine
    modes, shifted to be non-negative.
    """

    def __init__(self, seed=0, cells=64, n_modes=4, amplitude=5.0):
        rng = default_rng(seed)
        self.cells = cells
        self.amplitudes = amplitude * rng.uniform(-1, 1, n_modes)
        self.frequencies = np.arange(1, n_modes + 1) * np.pi
        self.phases = rng.uniform(0, 2 * np.pi, n_modes)
        self.offset = np.sum(np.abs(self.amplitudes))

    def get_grid(self):
        return build_grid(Box([0.0], [1.0]), self.cells)

    def get_potential(self):
        def V(x):
            x = x[:, 0]
            modes = np.cos(np.outer(x, self.frequencies) + self.phases)
            return self.offset + modes @ self.amplitudes

        return custom(V, vectorized=True)
