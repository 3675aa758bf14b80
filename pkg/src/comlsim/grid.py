"""Uniform Cartesian grids, scalar fields and square-subdomain decompositions.

Arrays are stored row-major as ``values[j, i]`` with ``j`` the y index and
``i`` the x index, so x varies fastest. Subdomains are numbered the same
way: subdomain ``(i, j)`` has index ``j * cx + i``. Row ``j = 0`` is the
bottom edge of the domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: sentinel in neighbour tables for "no neighbour" (domain edge)
MISSING = -1

#: neighbour slot order shared by the flux stencil
DIRECTIONS = ("left", "right", "top", "bottom")


class DimensionError(ValueError):
    """Raised when sizes do not divide or shapes do not line up."""


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if int(self.nx) < 4 or int(self.ny) < 4:
            raise DimensionError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise DimensionError("physical extents must be positive")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "lx", float(self.lx))
        object.__setattr__(self, "ly", float(self.ly))

    @property
    def hx(self) -> float:
        return self.lx / self.nx

    @property
    def hy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    def cell_centers(self):
        """Return ``(X, Y)`` arrays of cell-centre coordinates, shape ``(ny, nx)``."""
        x = (np.arange(self.nx) + 0.5) * self.hx
        y = (np.arange(self.ny) + 0.5) * self.hy
        return np.meshgrid(x, y)

    def same_spacing(self, other: "GridSpec", rtol=1e-12) -> bool:
        return bool(np.isclose(self.hx, other.hx, rtol=rtol, atol=0)
                    and np.isclose(self.hy, other.hy, rtol=rtol, atol=0))

    def scaled(self, factor: int) -> "GridSpec":
        """A grid ``factor`` times larger in each direction at the same spacing."""
        return GridSpec(self.nx * factor, self.ny * factor, self.lx * factor, self.ly * factor)


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size != self.grid.size:
            raise DimensionError(
                f"field has {v.size} values, grid {self.grid.nx}x{self.grid.ny} needs {self.grid.size}"
            )
        v = v.reshape(self.grid.shape).copy()
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: GridSpec, c: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(c)))

    def __eq__(self, other):
        if not isinstance(other, ScalarField):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)

    def mean(self) -> float:
        return float(self.values.mean())


def _as_array(field_or_array) -> np.ndarray:
    if isinstance(field_or_array, ScalarField):
        return field_or_array.values
    return np.asarray(field_or_array, dtype=np.float64)


@dataclass(frozen=True)
class Decomposition:
    """Non-overlapping partition of a grid into ``s x s`` subdomains."""

    grid: GridSpec
    s: int
    neighbors: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = int(self.s)
        object.__setattr__(self, "s", s)
        if s < 1 or self.grid.nx % s or self.grid.ny % s:
            raise DimensionError(
                f"subdomain edge {s} does not divide grid {self.grid.nx}x{self.grid.ny}"
            )
        cx, cy = self.grid.nx // s, self.grid.ny // s
        nb = np.full((cx * cy, 4), MISSING, dtype=np.int64)
        for j in range(cy):
            for i in range(cx):
                k = j * cx + i
                if i > 0:
                    nb[k, 0] = k - 1
                if i < cx - 1:
                    nb[k, 1] = k + 1
                if j < cy - 1:
                    nb[k, 2] = k + cx
                if j > 0:
                    nb[k, 3] = k - cx
        nb.setflags(write=False)
        object.__setattr__(self, "neighbors", nb)

    @property
    def cx(self) -> int:
        return self.grid.nx // self.s

    @property
    def cy(self) -> int:
        return self.grid.ny // self.s

    @property
    def n_subdomains(self) -> int:
        return self.cx * self.cy

    def index(self, i: int, j: int) -> int:
        return j * self.cx + i

    def position(self, k: int) -> tuple[int, int]:
        return k % self.cx, k // self.cx

    def neighbor(self, k: int, direction: str) -> int:
        return int(self.neighbors[k, DIRECTIONS.index(direction)])


def decompose(field_or_array, s: int, grid: GridSpec | None = None) -> np.ndarray:
    """Split a field into ``s x s`` patches, returned as ``(n_subdomains, s, s)``.

    Also accepts a stack ``(..., ny, nx)``; leading axes are kept in front.
    """
    a = _as_array(field_or_array)
    ny, nx = a.shape[-2:]
    if s < 1 or nx % s or ny % s:
        raise DimensionError(f"subdomain edge {s} does not divide {nx}x{ny}")
    cx, cy = nx // s, ny // s
    lead = a.shape[:-2]
    p = a.reshape(lead + (cy, s, cx, s))
    nd = len(lead)
    p = np.moveaxis(p, nd + 2, nd + 1)  # (..., cy, cx, s, s)
    return np.ascontiguousarray(p).reshape(lead + (cy * cx, s, s))


def stitch(patches, decomposition: Decomposition) -> ScalarField:
    """Inverse of :func:`decompose` for a single field."""
    p = np.asarray(patches, dtype=np.float64)
    d = decomposition
    if p.shape != (d.n_subdomains, d.s, d.s):
        raise DimensionError(
            f"expected patches of shape {(d.n_subdomains, d.s, d.s)}, got {p.shape}"
        )
    return ScalarField(d.grid, stitch_array(p, d.cx, d.cy))


def stitch_array(patches: np.ndarray, cx: int, cy: int) -> np.ndarray:
    """Array-level stitch: ``(..., cy*cx, s, s)`` to ``(..., cy*s, cx*s)``."""
    lead = patches.shape[:-3]
    s = patches.shape[-1]
    nd = len(lead)
    a = patches.reshape(lead + (cy, cx, s, s))
    a = np.moveaxis(a, nd + 1, nd + 2)  # (..., cy, s, cx, s)
    return np.ascontiguousarray(a).reshape(lead + (cy * s, cx * s))


def restrict(f: ScalarField, factor: int) -> ScalarField:
    """Block average over ``factor x factor`` cells."""
    factor = int(factor)
    g = f.grid
    if factor < 1 or g.nx % factor or g.ny % factor:
        raise DimensionError(f"restriction factor {factor} does not divide {g.nx}x{g.ny}")
    v = f.values.reshape(g.ny // factor, factor, g.nx // factor, factor).mean(axis=(1, 3))
    coarse = _coarse_grid(g, factor)
    return ScalarField(coarse, v)


def _coarse_grid(g: GridSpec, factor: int) -> GridSpec:
    nx, ny = g.nx // factor, g.ny // factor
    # GridSpec insists on >= 4 cells; tiny coarse grids bypass that check
    obj = object.__new__(GridSpec)
    for k, v in (("nx", nx), ("ny", ny), ("lx", g.lx), ("ly", g.ly)):
        object.__setattr__(obj, k, v)
    return obj


def prolong(f: ScalarField, factor: int) -> ScalarField:
    """Bilinear interpolation between cell centres onto a ``factor`` finer grid.

    Values beyond the outermost coarse centres are held constant.
    """
    factor = int(factor)
    if factor < 1:
        raise DimensionError("prolongation factor must be >= 1")
    g = f.grid
    fine = GridSpec(g.nx * factor, g.ny * factor, g.lx, g.ly)
    if factor == 1:
        return ScalarField(fine, f.values)

    def weights(n_coarse):
        # fine cell centres expressed in coarse-centre index coordinates
        t = (np.arange(n_coarse * factor) + 0.5) / factor - 0.5
        t = np.clip(t, 0.0, n_coarse - 1)
        i0 = np.minimum(np.floor(t).astype(int), max(n_coarse - 2, 0))
        i1 = np.minimum(i0 + 1, n_coarse - 1)
        return i0, i1, t - i0

    x0, x1, wx = weights(g.nx)
    y0, y1, wy = weights(g.ny)
    v = f.values
    rows = v[y0] * (1 - wy)[:, None] + v[y1] * wy[:, None]
    out = rows[:, x0] * (1 - wx)[None, :] + rows[:, x1] * wx[None, :]
    return ScalarField(fine, out)


@dataclass(frozen=True)
class Normalizer:
    """Global min-max scaling of one or more variables onto ``[-1, 1]``."""

    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    def __post_init__(self):
        if len(self.mins) != len(self.maxs):
            raise ValueError("mins and maxs must have equal length")
        for lo, hi in zip(self.mins, self.maxs):
            if not (np.isfinite(lo) and np.isfinite(hi)) or not hi > lo:
                raise ValueError(f"degenerate normalizer range [{lo}, {hi}]")

    @classmethod
    def fit(cls, data, n_vars: int = 1) -> "Normalizer":
        """Fit on an array whose axis ``-3`` (or only axis set) indexes variables.

        ``data`` is ``(n, n_vars, ny, nx)`` for several variables or any
        array for a single variable.
        """
        a = np.asarray(data, dtype=np.float64)
        if n_vars == 1:
            return cls((float(a.min()),), (float(a.max()),))
        axes = tuple(i for i in range(a.ndim) if i != 1)
        return cls(tuple(map(float, a.min(axis=axes))), tuple(map(float, a.max(axis=axes))))

    @property
    def n_vars(self) -> int:
        return len(self.mins)

    def _bounds(self, var):
        if var is None:
            lo = np.asarray(self.mins)
            hi = np.asarray(self.maxs)
            return lo, hi
        return self.mins[var], self.maxs[var]

    def normalize(self, x, var: int | None = 0):
        """Map ``[min, max]`` onto ``[-1, 1]``.

        With ``var=None`` the trailing variable axis is ``-3`` of a
        ``(..., n_vars, ny, nx)`` array.
        """
        lo, hi = self._bounds(var)
        if isinstance(x, ScalarField):
            return ScalarField(x.grid, self.normalize(x.values, var))
        x = np.asarray(x, dtype=np.float64)
        if var is None:
            lo = lo[:, None, None]
            hi = hi[:, None, None]
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    def denormalize(self, x, var: int | None = 0):
        lo, hi = self._bounds(var)
        if isinstance(x, ScalarField):
            return ScalarField(x.grid, self.denormalize(x.values, var))
        x = np.asarray(x, dtype=np.float64)
        if var is None:
            lo = lo[:, None, None]
            hi = hi[:, None, None]
        return (x + 1.0) * 0.5 * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {"mins": list(self.mins), "maxs": list(self.maxs)}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(tuple(d["mins"]), tuple(d["maxs"]))
