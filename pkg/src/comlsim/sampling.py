"""Random PDE conditions: Gaussian-mixture and tiled sources, Laplace boundary
conditions and two-level Darcy diffusivities.

Every sampler is a pure function of its arguments; randomness comes from a
``numpy`` PCG64 generator seeded with the supplied 64-bit seed.

Gaussian means are drawn in domain-normalised units (fractions of the
domain extent) and widths in physical units where the unit square is the
reference domain. Growing the domain at fixed spacing therefore spreads
the means over the larger domain while each hot spot keeps its size in
cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .fdm import BcKind, BoundarySpec
from .grid import DimensionError, GridSpec, ScalarField

ALPHA_LOW = 3.0
ALPHA_HIGH = 12.0


@dataclass(frozen=True)
class GmmSpec:
    k_max: int = 30
    mu_range: tuple[float, float] = (0.0, 1.0)
    sigma_range: tuple[float, float] = (0.004, 0.04)
    seed: int = 0

    def __post_init__(self):
        if int(self.k_max) < 1:
            raise ValueError("k_max must be at least 1")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid sigma range {self.sigma_range}")
        mlo, mhi = self.mu_range
        if not mlo <= mhi:
            raise ValueError(f"invalid mean range {self.mu_range}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @classmethod
    def for_resolution(cls, n: int, nonlinear: bool = False, **kw) -> "GmmSpec":
        """Widths that keep hot spots the same size in cells as the reference
        setting (1 to 10 cells for the linear case, 5 to 50 for the nonlinear
        one, both measured at 1024 cells per unit length)."""
        lo, hi = (0.005, 0.05) if nonlinear else (0.001, 0.01)
        scale = 1024.0 / n
        return cls(sigma_range=(lo * scale, hi * scale), **kw)

    def with_seed(self, seed: int) -> "GmmSpec":
        return GmmSpec(self.k_max, self.mu_range, self.sigma_range, int(seed))


@dataclass(frozen=True, eq=False)
class GmmParams:
    """Mixture parameters; ``mu``/``sigma`` in physical units, shape ``(k,)`` each."""

    amplitude: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.amplitude))


def draw_gmm_params(spec: GmmSpec, grid: GridSpec, k: int | None = None) -> GmmParams:
    """Draw mixture parameters. ``k=None`` draws the active count from ``{1..k_max}``."""
    rng = np.random.default_rng(int(spec.seed))
    n_total = spec.k_max if k is None else int(k)
    if n_total < 1:
        raise ValueError("at least one Gaussian is required")
    lo, hi = spec.mu_range
    mu_x = rng.uniform(lo, hi, n_total) * grid.lx
    mu_y = rng.uniform(lo, hi, n_total) * grid.ly
    slo, shi = spec.sigma_range
    sigma_x = rng.uniform(slo, shi, n_total)
    sigma_y = rng.uniform(slo, shi, n_total)
    amplitude = np.ones(n_total)
    if k is None:
        n_active = int(rng.integers(1, spec.k_max + 1))
        amplitude[rng.permutation(n_total)[n_active:]] = 0.0
    return GmmParams(amplitude, mu_x, mu_y, sigma_x, sigma_y)


def gmm_evaluate(params: GmmParams, x, y) -> np.ndarray:
    """Sum of anisotropic Gaussians ``A exp(-((x-mx)/sx)^2 - ((y-my)/sy)^2)`` at points."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    for a, mx, my, sx, sy in zip(params.amplitude, params.mu_x, params.mu_y,
                                 params.sigma_x, params.sigma_y):
        if a == 0.0:
            continue
        out += a * np.exp(-((x - mx) / sx) ** 2) * np.exp(-((y - my) / sy) ** 2)
    return out


def _field_from_params(grid: GridSpec, params: GmmParams) -> ScalarField:
    xc = (np.arange(grid.nx) + 0.5) * grid.hx
    yc = (np.arange(grid.ny) + 0.5) * grid.hy
    out = np.zeros(grid.shape)
    for a, mx, my, sx, sy in zip(params.amplitude, params.mu_x, params.mu_y,
                                 params.sigma_x, params.sigma_y):
        if a != 0.0:
            out += a * np.outer(np.exp(-((yc - my) / sy) ** 2), np.exp(-((xc - mx) / sx) ** 2))
    return ScalarField(grid, out)


def sample_gmm_source(grid: GridSpec, spec: GmmSpec = GmmSpec()) -> ScalarField:
    return _field_from_params(grid, draw_gmm_params(spec, grid))


def sample_gmm_fixed_k(grid: GridSpec, spec: GmmSpec, k: int) -> ScalarField:
    if int(k) < 1:
        raise ValueError("k must be at least 1")
    return _field_from_params(grid, draw_gmm_params(spec, grid, k=int(k)))


def sample_tiled_source(grid: GridSpec, tiles: int = 8, total: float = 1.0,
                        seed: int = 0) -> ScalarField:
    """Piecewise-constant source on ``tiles x tiles`` blocks with a fixed integral."""
    tiles = int(tiles)
    if tiles < 1 or grid.nx % tiles or grid.ny % tiles:
        raise DimensionError(f"{tiles} tiles per axis do not divide {grid.nx}x{grid.ny}")
    rng = np.random.default_rng(int(seed))
    r = rng.uniform(0.0, 1.0, (tiles, tiles))
    tile_area = grid.lx * grid.ly / tiles ** 2
    vals = r * (float(total) / (r.sum() * tile_area))
    bx, by = grid.nx // tiles, grid.ny // tiles
    return ScalarField(grid, np.kron(vals, np.ones((by, bx))))


@dataclass(frozen=True, eq=False)
class BcEncoding:
    """Eight numbers: four kind flags (left, right, top, bottom) then four magnitudes."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).copy()
        if v.shape != (8,):
            raise ValueError("boundary encoding must have length 8")
        if not np.all(np.isin(v[:4], (0.0, 1.0))):
            raise ValueError("kind flags must be 0 (Dirichlet) or 1 (Neumann)")
        if np.all(v[:4] == 1.0):
            raise ValueError("at least one edge must be Dirichlet")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def kinds(self) -> tuple[BcKind, ...]:
        return tuple(BcKind(int(k)) for k in self.vector[:4])

    @property
    def magnitudes(self) -> np.ndarray:
        return self.vector[4:]

    def boundary(self) -> BoundarySpec:
        return BoundarySpec.from_encoding(self.vector)

    def __eq__(self, other):
        return isinstance(other, BcEncoding) and np.array_equal(self.vector, other.vector)

    __hash__ = None


def sample_laplace_bc(seed: int) -> BcEncoding:
    rng = np.random.default_rng(int(seed))
    while True:
        flags = rng.integers(0, 2, 4)
        if np.any(flags == 0):
            break
    mags = rng.uniform(-1.0, 1.0, 4)
    return BcEncoding(np.concatenate([flags.astype(np.float64), mags]))


def threshold_two_level(pre: np.ndarray, low=ALPHA_LOW, high=ALPHA_HIGH) -> np.ndarray:
    """Map values at or above the median to ``high`` and the rest to ``low``."""
    med = np.median(pre)
    return np.where(pre >= med, high, low)


def sample_darcy_alpha(grid: GridSpec, seed: int = 0, smoothing: float = 0.05) -> ScalarField:
    """Two-level diffusivity from a Gaussian-smoothed white-noise field.

    ``smoothing`` is the filter width as a fraction of the domain extent.
    """
    rng = np.random.default_rng(int(seed))
    noise = rng.standard_normal(grid.shape)
    pre = gaussian_filter(noise, sigma=(smoothing * grid.ny, smoothing * grid.nx), mode="reflect")
    return ScalarField(grid, threshold_two_level(pre))
