"""
Experiment configuration: TOML files with ``[problem]``, ``[solver]``, ``[flow]`` and
``[output]`` sections, validated with pydantic, plus the built-in desk-scale presets.

A minimal file reusing a preset::

    preset = "oscillator2d"

    [flow]
    tau = 0.5

Unknown keys are errors. Values given in the file override those of the preset.
"""

import sys
import warnings
from copy import deepcopy
from itertools import product
from typing import Dict, List, Literal, Optional

import numpy as np
from scipy.special import comb
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from orthoflow.grid import Box, build_grid, get_potential, GridError
from orthoflow.flow import FlowConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

problem_names = ("oscillator1d", "oscillator2d", "hydrogen3d", "custom")

# Desk-scale versions of the two test problems. At full scale the oscillator uses
# 39601 degrees of freedom and tau = 0.05, and hydrogen 570662 with tau = 1.0.
presets = {
    "oscillator1d": {
        "problem": {
            "lower": [-8.0], "upper": [8.0], "cells_per_dim": [256], "N": 3,
            "c_lap": 0.5, "shift": 0.0, "potential": "harmonic",
        },
        "flow": {"tau": 0.5, "tol": 1e-10, "max_iter": 20000},
    },
    "oscillator2d": {
        "problem": {
            "lower": [-5.5, -5.5], "upper": [5.5, 5.5], "cells_per_dim": [128, 128],
            "N": 15, "c_lap": 0.5, "shift": 0.0, "potential": "harmonic",
        },
        "flow": {"tau": 0.05, "tol": 1e-10, "max_iter": 50000},
    },
    "hydrogen3d": {
        # 56 interior nodes per dimension, h = 20/57; an odd cell count keeps the
        # origin off-grid. The box still holds the n = 2 shell to 1e-2.
        "problem": {
            "lower": [-10.0] * 3, "upper": [10.0] * 3, "cells_per_dim": [57] * 3,
            "N": 5, "c_lap": 0.5, "shift": 1.0, "potential": "coulomb",
            "potential_params": {"charge": 1.0, "v_max": 1e3},
        },
        "solver": {"backend": "cg", "cg_rel_tol": 1e-14},
        "flow": {"tau": 1.0, "tol": 1e-10, "max_iter": 20000},
    },
}


class ConfigError(ValueError):
    """
    Exception raised for missing, unreadable or invalid configuration files.
    """


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ProblemConfig(_Section):
    """Domain, discretisation and operator."""

    lower: List[float]
    upper: List[float]
    cells_per_dim: List[int]
    N: int = Field(gt=0)
    c_lap: float = Field(default=1.0, gt=0)
    shift: float = Field(default=0.0, ge=0)
    potential: Literal["harmonic", "coulomb", "constant"] = "constant"
    potential_params: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_grid(self):
        try:
            grid = build_grid(Box(self.lower, self.upper), self.cells_per_dim)
            get_potential(self.potential, **self.potential_params)
        except GridError as excpt:
            raise ValueError(str(excpt)) from excpt
        if self.N + 1 > grid.n_g:
            raise ValueError(
                f"N + 1 = {self.N + 1} exceeds the number of unknowns {grid.n_g}."
            )
        if self.potential == "coulomb" and grid.has_node_at_origin():
            warnings.warn(
                "A grid node sits at the Coulomb singularity: its potential is capped "
                "at -v_max. Use an odd number of cells per dimension on symmetric "
                "boxes."
            )
        return self


class SolverConfig(_Section):
    """Green's solver and reference eigensolver."""

    backend: Literal["direct", "cg"] = "direct"
    cg_rel_tol: float = Field(default=1e-12, gt=0)
    cg_max_iter: Optional[int] = Field(default=None, gt=0)
    n_threads: Optional[int] = Field(default=None, gt=0)
    oracle_mode: Literal["auto", "dense", "iterative"] = "auto"
    oracle_max_iter: int = Field(default=2000, gt=0)


class FlowSettings(_Section):
    """Time stepping and stopping rule."""

    tau: float = Field(default=0.05, gt=0)
    tau_min: Optional[float] = Field(default=None, gt=0)
    tau_max: Optional[float] = Field(default=None, gt=0)
    tol: float = Field(default=1e-10, gt=0)
    max_iter: int = Field(default=100000, gt=0)
    seed: Optional[int] = 0
    ortho_alarm: float = Field(default=1e-8, gt=0)
    energy_floor: float = Field(default=1e-14, gt=0)

    @model_validator(mode="after")
    def _check_tau(self):
        tau_min = self.tau if self.tau_min is None else self.tau_min
        tau_max = self.tau if self.tau_max is None else self.tau_max
        if not tau_min <= self.tau <= tau_max:
            raise ValueError(
                f"Need tau_min <= tau <= tau_max. Got {tau_min}, {self.tau}, {tau_max}."
            )
        return self


class EmitFlags(_Section):
    """Output files to be written."""

    records_csv: bool = True
    summary_json: bool = True
    eigenvalue_table_csv: bool = True
    orbital_errors_csv: bool = False
    final_orbitals: bool = True


class OutputConfig(_Section):
    """Output folder, emitted files, reference handling and checkpoints."""

    output_dir: str = "orthoflow_output"
    emit: EmitFlags = Field(default_factory=EmitFlags)
    reference: Optional[str] = None
    compute_reference: bool = True
    replay_err_U: bool = True
    checkpoint_every: int = Field(default=0, ge=0)
    load_checkpoint: Literal["resume", "overwrite"] = "overwrite"
    progress_bar: bool = True


class ExperimentConfig(_Section):
    """Full experiment configuration."""

    preset: Optional[Literal["oscillator1d", "oscillator2d", "hydrogen3d"]] = None
    problem: ProblemConfig
    solver: SolverConfig = Field(default_factory=SolverConfig)
    flow: FlowSettings = Field(default_factory=FlowSettings)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @property
    def name(self):
        """Name of the problem: the preset used, or ``"custom"``."""
        return self.preset or "custom"

    def flow_config(self):
        """The :class:`~orthoflow.flow.FlowConfig` of this experiment."""
        return FlowConfig(
            N=self.problem.N, tau=self.flow.tau, tol=self.flow.tol,
            max_iter=self.flow.max_iter, seed=self.flow.seed,
            ortho_alarm=self.flow.ortho_alarm, tau_min=self.flow.tau_min,
            tau_max=self.flow.tau_max, energy_floor=self.flow.energy_floor,
        )

    def grid(self):
        """The :class:`~orthoflow.grid.TensorGrid` of this experiment."""
        return build_grid(
            Box(self.problem.lower, self.problem.upper), self.problem.cells_per_dim
        )

    def potential(self):
        """The :class:`~orthoflow.grid.Potential` of this experiment."""
        return get_potential(self.problem.potential, **self.problem.potential_params)


def get_preset(name):
    """Returns a copy of the settings of a built-in preset."""
    try:
        return deepcopy(presets[name])
    except KeyError as excpt:
        raise ConfigError(
            f"Unknown preset {name!r}. Available presets: {list(presets)}."
        ) from excpt


def merge_dicts(defaults, overrides):
    """Recursively merges ``overrides`` into a copy of ``defaults``."""
    merged = deepcopy(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_dicts(merged[key], value)
        else:
            merged[key] = deepcopy(value)
    return merged


def _format_validation_error(excpt):
    return "; ".join(
        f"{'.'.join(str(i) for i in err['loc']) or '<root>'}: {err['msg']}"
        for err in excpt.errors()
    )


def load_config(source, overrides=None):
    """
    Loads and validates an experiment configuration.

    Parameters
    ----------
    source : str, path, dict or ExperimentConfig
        Path to a TOML file, a dict with the same structure, or an already-built config.
    overrides : dict, optional
        Values overriding those of the source (same structure).

    Returns
    -------
    ExperimentConfig

    Raises
    ------
    ConfigError
        If the file does not exist or cannot be parsed, or the configuration is invalid.
        The message names the file and the offending keys.
    """
    where = "<dict>"
    if isinstance(source, ExperimentConfig):
        source = source.model_dump()
    elif not isinstance(source, dict):
        where = str(source)
        try:
            with open(source, "rb") as f:
                source = tomllib.load(f)
        except FileNotFoundError as excpt:
            raise ConfigError(f"Configuration file not found: {where}") from excpt
        except tomllib.TOMLDecodeError as excpt:
            raise ConfigError(f"Could not parse {where}: {excpt}") from excpt
    info = merge_dicts(source, overrides or {})
    preset = info.get("preset")
    if preset is not None:
        info = merge_dicts(get_preset(preset), info)
    try:
        return ExperimentConfig(**info)
    except ValidationError as excpt:
        raise ConfigError(
            f"Invalid configuration in {where}: {_format_validation_error(excpt)}"
        ) from excpt
    except TypeError as excpt:
        raise ConfigError(f"Invalid configuration in {where}: {excpt}") from excpt


def _with_multiplicities(levels, k):
    return np.sort(np.concatenate(levels))[:k]


def analytic_eigenvalues(config, k=None):
    """
    Eigenvalues of the continuum problem (without shift) when known in closed form, or
    ``None``.

    - harmonic ``omega^2 |x|^2 / 2`` (box much larger than the orbitals):
      ``omega sqrt(2 c_lap) (n_1 + ... + n_d + d/2)``;
    - coulomb ``-Z / |x|`` in 3 dimensions: ``-Z^2 / (4 c_lap n^2)`` with multiplicity
      ``n^2``;
    - constant ``V_0`` on the box: ``c_lap pi^2 sum_i (n_i / L_i)^2 + V_0``.

    Parameters
    ----------
    config : ExperimentConfig
    k : int, optional
        Number of values (default: ``N + 1``).
    """
    problem = config.problem
    k = problem.N + 1 if k is None else k
    dim = len(problem.lower)
    c = problem.c_lap
    params = problem.potential_params
    if problem.potential == "harmonic":
        omega = params.get("omega", 1.0)
        levels = [
            np.full(comb(n + dim - 1, dim - 1, exact=True), n + dim / 2)
            for n in range(k)
        ]
        return omega * np.sqrt(2 * c) * _with_multiplicities(levels, k)
    if problem.potential == "coulomb":
        if dim != 3:
            return None
        charge = params.get("charge", 1.0)
        levels, n = [], 1
        while sum(len(lev) for lev in levels) < k:
            levels.append(np.full(n**2, -(charge**2) / (4 * c * n**2)))
            n += 1
        return _with_multiplicities(levels, k)
    if problem.potential == "constant":
        widths = np.array(problem.upper) - np.array(problem.lower)
        n_max = k + 1
        values = [
            c * np.pi**2 * np.sum((np.array(ns) / widths) ** 2)
            for ns in product(range(1, n_max + 1), repeat=dim)
        ]
        return np.sort(values)[:k] + params.get("value", 0.0)
    return None

