"""
Classes for timing and progress tracking.
"""

import time

import numpy as np
import pandas as pd

#: Columns of ``records.csv``, in order.
records_columns = [
    "n", "t", "energy", "energy_shift_corrected", "err_E", "ortho_err", "err_U",
    "dist_class_a", "delta_L2",
]


class Progress:
    """
    Pandas DataFrame storing one :class:`~orthoflow.diagnostics.RunRecord` per iterate.
    A progress instance is created by the :class:`run.Runner` object and internally
    populated when calling the :meth:`run.Runner.run` function.
    """

    _colnames = {
        "n": "iteration index",
        "t": "accumulated time (sum of time steps)",
        "tau": "time step used to reach this iterate",
        "energy": "energy of the shifted operator",
        "energy_shift_corrected": "energy minus N * shift / 2",
        "err_E": "relative energy change of the last step",
        "ortho_err": "Frobenius distance of the L2 Gram matrix to the identity",
        "err_U": "relative distance to the final state (no alignment)",
        "dist_class_a": "energy-norm distance of the class [U] to the reference",
        "delta_L2": "sine of the largest principal angle to the reference",
        "delta_H1": "energy-norm subspace distance to the reference",
        "residual_L": "energy norm of L_U U",
        "perp_norm_a": "energy norm of the component orthogonal to the reference span",
        "asymmetry": "Frobenius norm of the antisymmetric part of <GU, U>",
        "time_green": "time needed for the Green's solves of the iterate",
    }
    _dtypes = {col: (int if col == "n" else float) for col in _colnames}

    def __init__(self):
        """Initialises Progress table."""
        self.data = pd.DataFrame(columns=list(self._colnames)).astype(self._dtypes)

    def __repr__(self):
        return self.data.__repr__()

    def __len__(self):
        return len(self.data)

    @classmethod
    def from_records(cls, records):
        """
        Creates a table from an iterable of :class:`~orthoflow.diagnostics.RunRecord`.
        """
        progress = cls()
        progress.data = pd.DataFrame(
            [r.as_dict() for r in records], columns=list(cls._colnames)
        ).astype(cls._dtypes)
        return progress

    def set_column(self, column, values):
        """Overwrites a column with one value per row."""
        if column not in self._colnames:
            raise ValueError(f"Unknown column {column!r}.")
        values = np.asarray(values, dtype=float)
        if len(values) != len(self.data):
            raise ValueError(
                f"Got {len(values)} values for a table of {len(self.data)} rows."
            )
        self.data[column] = values

    def column(self, column):
        """Returns a column as a numpy array."""
        return self.data[column].to_numpy(dtype=self._dtypes[column])

    def to_csv(self, path, columns=None):
        """
        Writes the table as CSV with the given ``columns`` (default: those of
        ``records.csv``). Missing values are written as empty fields.
        """
        columns = records_columns if columns is None else columns
        self.data.to_csv(
            path, columns=columns, index=False, na_rep="", float_format="%.17g"
        )

    @classmethod
    def read_csv(cls, path):
        """Reads a table written by :meth:`to_csv`."""
        table = pd.read_csv(path, float_precision="round_trip")
        progress = cls()
        progress.data = table.reindex(columns=list(cls._colnames)).astype(cls._dtypes)
        return progress


# pylint: disable=attribute-defined-outside-init
class Timer:
    """Class for timing code within ``with`` block."""

    def __enter__(self):
        """Saves initial wallclock time."""
        self.start = time.time()
        return self

    def __exit__(self, *args, **kwargs):
        """Saves final wallclock time and difference."""
        self.end = time.time()
        self.time = self.end - self.start


class TimerCounter(Timer):
    """
    Class for timing code within ``with`` block, and count the number of single-column
    solves of the given Green's solvers.
    """

    def __init__(self, *solvers):
        """Takes the solvers whose solves will be counted."""
        self.solvers = solvers

    def __enter__(self):
        """Saves initial wallclock time and number of solves."""
        super().__enter__()
        self.init_solves = np.array([s.n_solves for s in self.solvers], dtype=int)
        return self

    def __exit__(self, *args, **kwargs):
        """Saves final wallclock time and number of solves, and their differences."""
        super().__exit__()
        self.final_solves = np.array([s.n_solves for s in self.solvers], dtype=int)
        self.solves = int(sum(self.final_solves - self.init_solves))
