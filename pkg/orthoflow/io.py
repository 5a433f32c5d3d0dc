"""
Module containing i/o utilities: checkpoints, reference packs and orbital dumps in the
versioned text format, and JSON summaries.
"""

import os
import json

import numpy as np
import dill as pickle

from orthoflow.grid import Box, TensorGrid, GridError, build_grid
from orthoflow.operator import OrbitalSet
from orthoflow.diagnostics import ReferencePack

_checkpoint_filenames = {
    "state": "state.pkl",
    "progress": "progress.pkl",
    "options": "options.pkl",
}

#: First line of reference-pack and orbital files.
reference_header = "# orthoflow-reference v1"

#: Version of the ``summary.json`` layout.
summary_schema_version = 1


class PackFormatError(ValueError):
    """
    Exception raised when a reference-pack file is malformed or does not match the
    expected grid or number of orbitals.
    """


def create_path(path, verbose=True):
    """
    Creates a path if it doesn't exist already and prints a message if creating a new
    directory. If the directory already exits it does nothing.

    Parameters
    ----------
    path : string or path
        The path which shall be created.
    """
    if not os.path.exists(path):
        os.makedirs(path)
        if verbose:
            print("[OUTPUT] Successfully created the directory %s" % path)


def check_checkpoint(path=None):
    """
    Checks if there are checkpoint files in a specific location. Returns a list of bools
    in the order [state, progress, options].
    """
    if path is None:
        return [False] * len(_checkpoint_filenames)
    return [
        os.path.exists(os.path.join(path, f)) for f in _checkpoint_filenames.values()
    ]


def read_checkpoint(path):
    """
    Loads checkpoint files to be able to resume a run.

    Returns
    -------
    ``(state, progress, options)``. Missing files are returned as ``None``.
    """
    loaded = []
    for exists, filename in zip(check_checkpoint(path), _checkpoint_filenames.values()):
        if not exists:
            loaded.append(None)
            continue
        with open(os.path.join(path, filename), "rb") as i:
            loaded.append(pickle.load(i))
    return tuple(loaded)


def save_checkpoint(path, state, progress, options):
    """
    Saves the current :class:`~orthoflow.flow.FlowState`, the record table and the
    run options, so that a run can be resumed after a crash.

    Parameters
    ----------
    path : str
        Checkpoint folder (created if needed).
    state : FlowState
    progress : Progress
    options : dict
    """
    if path is None:
        return
    create_path(path, verbose=False)
    try:
        for name, obj in zip(_checkpoint_filenames, (state, progress, options)):
            with open(os.path.join(path, _checkpoint_filenames[name]), "wb") as f:
                pickle.dump(obj, f, pickle.HIGHEST_PROTOCOL)
    except Exception as excpt:
        raise RuntimeError(
            "Could not save the checkpoint. Check if the path "
            "is correct and exists. Error message: " + str(excpt)
        ) from excpt


def _fmt(values):
    return " ".join(f"{float(v):.17g}" for v in values)


def write_reference(path, pack):
    """
    Writes a reference pack (or a set of orbitals with their eigenvalue estimates) in
    the versioned text format::

        # orthoflow-reference v1
        # grid lower <d reals> upper <d reals> cells <d ints>
        # n_g <int> n_orbitals <int> n_extra <int> shift <real>
        # eigenvalues <operator eigenvalues>
        # residuals <reals>
        <n_g rows of n_orbitals + n_extra reals>
    """
    grid = pack.grid
    extra = pack.extra.data if pack.extra is not None else np.empty((grid.n_g, 0))
    data = np.hstack([pack.Ustar.data, extra])
    header = "\n".join([
        reference_header[2:],
        f"grid lower {_fmt(grid.box.lower)} upper {_fmt(grid.box.upper)} "
        f"cells {' '.join(str(m) for m in grid.cells_per_dim)}",
        f"n_g {grid.n_g} n_orbitals {pack.N} n_extra {extra.shape[1]} "
        f"shift {float(pack.shift):.17g}",
        f"eigenvalues {_fmt(pack.operator_eigenvalues)}",
        f"residuals {_fmt(pack.residuals)}",
    ])
    np.savetxt(path, data, fmt="%.17e", header=header, comments="# ")


def _parse_header(lines, path):
    if not lines or lines[0].strip() != reference_header:
        raise PackFormatError(
            f"{path} is not an orthoflow reference file (expected first line "
            f"{reference_header!r})."
        )
    fields = {}
    for line in lines[1:5]:
        tokens = line.lstrip("#").split()
        if not tokens:
            raise PackFormatError(f"Malformed header line in {path}: {line!r}")
        fields[tokens[0]] = tokens[1:]
    try:
        grid_tokens = fields["grid"]
        i_upper, i_cells = grid_tokens.index("upper"), grid_tokens.index("cells")
        lower = [float(x) for x in grid_tokens[1:i_upper]]
        upper = [float(x) for x in grid_tokens[i_upper + 1:i_cells]]
        cells = [int(x) for x in grid_tokens[i_cells + 1:]]
        sizes = dict(zip(fields["n_g"][1::2], fields["n_g"][2::2]))
        return {
            "lower": lower, "upper": upper, "cells": cells,
            "n_g": int(fields["n_g"][0]),
            "n_orbitals": int(sizes["n_orbitals"]),
            "n_extra": int(sizes["n_extra"]),
            "shift": float(sizes["shift"]),
            "eigenvalues": np.array([float(x) for x in fields["eigenvalues"]]),
            "residuals": np.array([float(x) for x in fields["residuals"]]),
        }
    except (KeyError, ValueError, IndexError) as excpt:
        raise PackFormatError(f"Malformed header in {path}: {excpt}") from excpt


def read_reference(path, grid=None):
    """
    Reads a reference pack written by :func:`write_reference`.

    Parameters
    ----------
    path : str
    grid : TensorGrid, optional
        If given, the file must have been written for this grid, and its orbitals are
        attached to it. Otherwise the grid is rebuilt from the header.

    Returns
    -------
    ReferencePack

    Raises
    ------
    FileNotFoundError, PackFormatError
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = [f.readline() for _ in range(5)]
    info = _parse_header(lines, path)
    try:
        file_grid = build_grid(Box(info["lower"], info["upper"]), info["cells"])
    except GridError as excpt:
        raise PackFormatError(f"Invalid grid in the header of {path}: {excpt}") from excpt
    if grid is None:
        grid = file_grid
    elif not isinstance(grid, TensorGrid) or grid != file_grid:
        raise PackFormatError(
            f"Reference {path} was computed on {file_grid}, not on {grid}."
        )
    try:
        data = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as excpt:
        raise PackFormatError(f"Malformed data in {path}: {excpt}") from excpt
    n_cols = info["n_orbitals"] + info["n_extra"]
    if data.shape != (info["n_g"], n_cols) or info["n_g"] != grid.n_g:
        raise PackFormatError(
            f"Reference {path}: expected data of shape ({grid.n_g}, {n_cols}), "
            f"got {data.shape}."
        )
    N = info["n_orbitals"]
    return ReferencePack(
        Ustar=OrbitalSet(data[:, :N], grid, copy=False),
        operator_eigenvalues=info["eigenvalues"],
        shift=info["shift"],
        residuals=info["residuals"],
        extra=OrbitalSet(data[:, N:], grid, copy=False) if info["n_extra"] else None,
    )


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def _json_safe(obj):
    """Replaces non-finite floats by ``None`` (valid JSON)."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_summary(path, summary):
    """Writes a summary dict as indented JSON, with ``schema_version`` first."""
    summary = {"schema_version": summary_schema_version, **summary}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_json_safe(summary), f, indent=2, default=_json_default)
        f.write("\n")


def read_summary(path):
    """Reads a JSON summary."""
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def update_summary(path, **entries):
    """Adds or replaces top-level entries of an existing JSON summary."""
    summary = read_summary(path)
    summary.update(entries)
    summary.pop("schema_version", None)
    write_summary(path, summary)
