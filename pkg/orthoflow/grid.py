"""
Tensor-product grids on boxes, potentials evaluated at their nodes, and the homogeneous
Dirichlet boundary convention used by every other module.

Only interior nodes carry unknowns. Nodes are ordered lexicographically with the *last*
coordinate running fastest (numpy's C order), i.e. the flat index of the multi-index
``(i_0, ..., i_{d-1})`` is ``numpy.ravel_multi_index(idx, grid.shape)``. Node ``idx``
sits at ``lower + (idx + 1) * h`` componentwise.
"""

from numbers import Number

import numpy as np

from orthoflow.tools import NumpyErrorHandling

#: Default cap for singular (Coulomb) potentials: values are clipped to ``>= -V_max``.
default_v_max = 1e3

_max_dim = 3


class GridError(ValueError):
    """
    Exception raised for invalid boxes, cell counts, or non-finite potential values.
    """


class Box:
    """
    Axis-aligned box ``(lower_0, upper_0) x ... x (lower_{d-1}, upper_{d-1})``.

    Parameters
    ----------
    lower, upper : float or sequence of floats
        Corners of the box. Scalars are interpreted as a 1-dimensional box.
    """

    def __init__(self, lower, upper):
        lower = np.array(np.atleast_1d(lower), dtype=float)
        upper = np.array(np.atleast_1d(upper), dtype=float)
        if lower.ndim != 1 or lower.shape != upper.shape:
            raise GridError(
                f"'lower' and 'upper' must be vectors of the same length. Got {lower} "
                f"and {upper}."
            )
        if not 1 <= len(lower) <= _max_dim:
            raise GridError(
                f"Only boxes of dimension 1 to {_max_dim} are supported. "
                f"Got {len(lower)}."
            )
        if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)):
            raise GridError(f"Box corners must be finite. Got {lower} and {upper}.")
        if np.any(lower >= upper):
            raise GridError(
                f"Box needs lower < upper in every dimension. Got {lower} and {upper}."
            )
        lower.setflags(write=False)
        upper.setflags(write=False)
        self._lower = lower
        self._upper = upper

    @property
    def lower(self):
        """Lower corner."""
        return self._lower

    @property
    def upper(self):
        """Upper corner."""
        return self._upper

    @property
    def dim(self):
        """Dimensionality of the box."""
        return len(self._lower)

    @property
    def widths(self):
        """Side lengths of the box."""
        return self._upper - self._lower

    def is_symmetric(self):
        """True if the box is symmetric with respect to the origin."""
        return bool(np.allclose(self._lower, -self._upper))

    def __eq__(self, other):
        return (
            isinstance(other, Box)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )

    def __repr__(self):
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


class TensorGrid:
    """
    Uniform tensor-product grid of ``cells_per_dim`` cells on a :class:`Box`.

    Immutable after construction; use :func:`build_grid` to create one.
    """

    def __init__(self, box, cells_per_dim):
        self._box = box
        cells = np.array(cells_per_dim, dtype=int)
        cells.setflags(write=False)
        self._cells = cells
        spacing = box.widths / cells
        spacing.setflags(write=False)
        self._spacing = spacing
        self._shape = tuple(int(m - 1) for m in cells)

    @property
    def box(self):
        """The :class:`Box` the grid lives on."""
        return self._box

    @property
    def dim(self):
        """Dimensionality of the grid."""
        return self._box.dim

    @property
    def cells_per_dim(self):
        """Number of cells ``m_i`` per dimension."""
        return self._cells

    @property
    def spacing(self):
        """Grid spacing ``h_i = (upper_i - lower_i) / m_i`` per dimension."""
        return self._spacing

    @property
    def shape(self):
        """Number of interior nodes per dimension, ``m_i - 1``."""
        return self._shape

    @property
    def n_g(self):
        """Total number of interior nodes (unknowns)."""
        return int(np.prod(self._shape))

    @property
    def mass_weight(self):
        """Diagonal mass ``h^d = prod(h_i)``: the quadrature weight of every node."""
        return float(np.prod(self._spacing))

    def flat_index(self, multi_index):
        """Flat (lexicographic, last coordinate fastest) index of a multi-index."""
        return np.ravel_multi_index(tuple(np.asarray(multi_index).T), self._shape)

    def multi_index(self, flat_index):
        """Multi-index of a flat index, as an array of shape ``(..., dim)``."""
        return np.stack(np.unravel_index(flat_index, self._shape), axis=-1)

    def coordinates(self, flat_index=None):
        """
        Coordinates of the interior nodes.

        Parameters
        ----------
        flat_index : int or array of int, optional
            If given, only the coordinates of these nodes are returned.

        Returns
        -------
        Array of shape ``(n_g, dim)`` (or ``(len(flat_index), dim)``).
        """
        if flat_index is None:
            flat_index = np.arange(self.n_g)
        idx = self.multi_index(flat_index)
        return self._box.lower + (idx + 1) * self._spacing

    def axes(self):
        """List of 1-d arrays with the interior node coordinates along each axis."""
        return [
            lo + np.arange(1, m) * h
            for lo, m, h in zip(self._box.lower, self._cells, self._spacing)
        ]

    def is_mirror_symmetric(self):
        """
        True if the node set is invariant under ``x -> -x`` (symmetric boxes).
        """
        return self._box.is_symmetric()

    def has_node_at_origin(self):
        """True if some interior node coincides with the origin."""
        for lo, m, h in zip(self._box.lower, self._cells, self._spacing):
            k = -lo / h
            if not (np.isclose(k, np.round(k)) and 1 <= np.round(k) <= m - 1):
                return False
        return True

    def __eq__(self, other):
        return (
            isinstance(other, TensorGrid)
            and self.box == other.box
            and np.array_equal(self.cells_per_dim, other.cells_per_dim)
        )

    def __repr__(self):
        return (
            f"TensorGrid(box={self.box!r}, "
            f"cells_per_dim={self.cells_per_dim.tolist()}, n_g={self.n_g})"
        )


def build_grid(box, cells_per_dim):
    """
    Creates a :class:`TensorGrid`.

    Parameters
    ----------
    box : Box or (lower, upper) tuple
        The domain.
    cells_per_dim : int or sequence of int
        Number of cells per dimension. A scalar is broadcast to all dimensions.

    Returns
    -------
    TensorGrid

    Raises
    ------
    GridError
        If some ``m_i < 2`` (no interior nodes), or the dimensionality is not 1, 2 or 3.
    """
    if not isinstance(box, Box):
        try:
            box = Box(*box)
        except TypeError as excpt:
            raise GridError(
                f"'box' must be a Box or a (lower, upper) pair. Got {box!r}."
            ) from excpt
    cells = np.atleast_1d(cells_per_dim)
    if len(cells) == 1 and box.dim > 1:
        cells = np.full(box.dim, cells[0])
    if len(cells) != box.dim:
        raise GridError(
            f"Got {len(cells)} cell counts for a box of dimension {box.dim}."
        )
    if not all(isinstance(m, Number) and float(m).is_integer() for m in cells.tolist()):
        raise GridError(f"Cell counts must be integers. Got {cells.tolist()}.")
    cells = cells.astype(int)
    if np.any(cells < 2):
        raise GridError(
            "Every dimension needs at least 2 cells (1 interior node). "
            f"Got {cells.tolist()}."
        )
    return TensorGrid(box, cells)


class Potential:
    """
    Real potential function ``V(x)`` evaluated at grid nodes.

    Use the factories :func:`harmonic`, :func:`coulomb`, :func:`constant` and
    :func:`custom`, or :func:`get_potential` to build one from a name or a callable.

    Parameters
    ----------
    kind : str
        One of ``"harmonic"``, ``"coulomb"``, ``"constant"`` or ``"custom"``.
    evaluator : callable
        Vectorised map from an ``(n, dim)`` array of coordinates to ``n`` reals.
    params : dict, optional
        Parameters of the potential (reported in summaries).
    v_max : float, optional
        If given, values are capped from below at ``-v_max``.
    """

    kinds = ("harmonic", "coulomb", "constant", "custom")

    def __init__(self, kind, evaluator, params=None, v_max=None):
        if kind not in self.kinds:
            raise GridError(
                f"Unknown potential kind {kind!r}. Use one of {self.kinds}."
            )
        if not callable(evaluator):
            raise GridError("The potential evaluator must be callable.")
        self.kind = kind
        self.evaluator = evaluator
        self.params = dict(params or {})
        self.v_max = v_max

    def __call__(self, x):
        """Evaluates the (capped) potential at an ``(n, dim)`` array of coordinates."""
        x = np.atleast_2d(x)
        with NumpyErrorHandling(all="ignore"):
            values = np.asarray(self.evaluator(x), dtype=float).reshape(len(x))
        if self.v_max is not None:
            # NaN (e.g. from 0/0) is left alone to be reported by eval_potential
            values = np.where(values < -self.v_max, -self.v_max, values)
        return values

    def as_dict(self):
        """Kind and parameters, for summaries."""
        return {"kind": self.kind, "params": self.params, "v_max": self.v_max}

    def __repr__(self):
        return f"Potential(kind={self.kind!r}, params={self.params})"


def harmonic(omega=1.0):
    """Harmonic potential ``omega^2 |x|^2 / 2``."""
    omega = float(omega)

    def evaluator(x):
        return 0.5 * omega**2 * np.sum(x**2, axis=1)

    return Potential("harmonic", evaluator, params={"omega": omega})


def coulomb(charge=1.0, v_max=default_v_max):
    """
    Attractive Coulomb potential ``-charge / |x|``, capped from below at ``-v_max``.

    The cap guards grids with a node at (or very close to) the origin. Nodes sit at
    ``lower + (idx + 1) h``, so on symmetric boxes an odd number of cells per dimension
    keeps every node off the origin.
    """
    charge = float(charge)

    def evaluator(x):
        return -charge / np.sqrt(np.sum(x**2, axis=1))

    return Potential(
        "coulomb", evaluator, params={"charge": charge}, v_max=float(v_max)
    )


def constant(value=0.0):
    """Constant potential."""
    value = float(value)

    def evaluator(x):
        return np.full(len(x), value)

    return Potential("constant", evaluator, params={"value": value})


def custom(func, vectorized=False, v_max=None):
    """
    Potential from a user callable.

    Parameters
    ----------
    func : callable
        Either a map from a coordinate vector to a real (``vectorized=False``), or from
        an ``(n, dim)`` array to ``n`` reals (``vectorized=True``).
    vectorized : bool (default: False)
        Whether ``func`` accepts arrays of points.
    v_max : float, optional
        Cap from below at ``-v_max``.
    """
    if not callable(func):
        raise GridError(f"Custom potential must be callable. Got {func!r}.")
    if vectorized:
        evaluator = func
    else:
        def evaluator(x):
            return np.array([func(xi) for xi in x], dtype=float)

    return Potential(
        "custom", evaluator, params={"function": getattr(func, "__name__", "?")},
        v_max=v_max,
    )


_potential_factories = {"harmonic": harmonic, "coulomb": coulomb, "constant": constant}


def get_potential(potential, **params):
    """
    Instantiates and returns a :class:`Potential`.

    Parameters
    ----------
    potential : Potential, str or callable
        An existing instance (returned as is), the name of a built-in potential (with
        ``params`` as its keyword arguments), or a callable taking a coordinate vector.
    """
    if isinstance(potential, Potential):
        return potential
    if isinstance(potential, str):
        try:
            factory = _potential_factories[potential.lower()]
        except KeyError as excpt:
            raise GridError(
                f"Unknown potential {potential!r}. Built-in potentials: "
                f"{list(_potential_factories)}."
            ) from excpt
        try:
            return factory(**params)
        except TypeError as excpt:
            raise GridError(
                f"Wrong parameters for potential {potential!r}: {params}. {excpt}"
            ) from excpt
    if callable(potential):
        return custom(potential, **params)
    raise GridError(
        "'potential' must be a Potential, the name of a built-in one or a callable. "
        f"Got {potential!r}."
    )


def eval_potential(grid, pot):
    """
    Evaluates a potential at every interior node, in grid order.

    Parameters
    ----------
    grid : TensorGrid
    pot : Potential

    Returns
    -------
    Array of ``n_g`` reals.

    Raises
    ------
    GridError
        If a value is non-finite after capping. The message names the first such node.
    """
    pot = get_potential(pot)
    values = pot(grid.coordinates())
    if values.shape != (grid.n_g,):
        raise GridError(
            f"Potential returned an array of shape {values.shape} for {grid.n_g} nodes."
        )
    bad = np.flatnonzero(~np.isfinite(values))
    if len(bad):
        i = int(bad[0])
        raise GridError(
            f"Potential {pot.kind!r} is not finite at node {i} "
            f"(multi-index {grid.multi_index(i).tolist()}, "
            f"x = {grid.coordinates(i).tolist()}): got {values[i]}. "
            f"{len(bad)} non-finite node(s) in total."
        )
    return values
