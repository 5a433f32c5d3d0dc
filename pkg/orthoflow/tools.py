"""
This module contains general tools used in different parts of the code.
"""

import os
from copy import deepcopy

import numpy as np
from numpy.random import SeedSequence, default_rng, Generator

#: Environment variable capping the number of worker threads for column solves.
threads_env_var = "ORTHO_FLOW_THREADS"


def get_random_generator(seed=None):
    """
    Returns a numpy random generator.

    Parameters
    ----------
    seed : int or numpy seed, or numpy.random.Generator, optional (default=None)
        A random seed to initialise a Generator, or a Generator to be used directly.
        If none is provided a random one will be drawn.
    """
    if isinstance(seed, Generator):
        return seed
    return default_rng(SeedSequence(seed))


def get_n_threads(n_threads=None):
    """
    Returns the number of worker threads to be used for independent column solves.

    An explicit ``n_threads`` is capped by the ``ORTHO_FLOW_THREADS`` environment
    variable if the latter is defined. If neither is given, the number of available
    cores is used.
    """
    env_value = os.environ.get(threads_env_var)
    cap = None
    if env_value:
        try:
            cap = int(env_value)
            if cap < 1:
                raise ValueError
        except ValueError as excpt:
            raise ValueError(
                f"{threads_env_var} must be a positive integer. Got {env_value!r}."
            ) from excpt
    if n_threads is None:
        n_threads = cap or os.cpu_count() or 1
    elif n_threads < 1:
        raise ValueError(f"'n_threads' must be a positive integer. Got {n_threads}.")
    if cap is not None:
        n_threads = min(n_threads, cap)
    return int(n_threads)


def frobenius_offset_from_identity(M):
    """Returns ``||I - M||_F`` for a square matrix ``M``."""
    M = np.atleast_2d(M)
    return float(np.linalg.norm(np.eye(M.shape[0]) - M, ord="fro"))


def symmetric_part(M):
    """Returns ``(M + M^T) / 2``."""
    return 0.5 * (M + M.T)


def relative_errors(values, reference):
    """
    Returns ``|values - reference| / |reference|`` elementwise.

    Raises ValueError if lengths differ.
    """
    values = np.atleast_1d(np.asarray(values, dtype=float))
    reference = np.atleast_1d(np.asarray(reference, dtype=float))
    if values.shape != reference.shape:
        raise ValueError(
            f"Shapes differ: {values.shape} for values and {reference.shape} for the "
            "reference."
        )
    return np.abs(values - reference) / np.abs(reference)


class NumpyErrorHandling:
    """
    Context for manual handling of numpy errors (e.g. ignoring, just printing...).

    NB: the call to ``deepcopy`` at init can become expensive if this ``with`` context
        is used repeatedly. One may want to put it at an upper level then.
    """

    def __init__(self, all):
        self.all = all
        self.error_handler = deepcopy(np.geterr())

    def __enter__(self):
        np.seterr(all=self.all)

    def __exit__(self, error_type, error_value, error_traceback):
        np.seterr(**self.error_handler)
        return False
