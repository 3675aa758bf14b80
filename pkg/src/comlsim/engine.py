"""Fixed-point latent solver.

Each subdomain carries a solution latent vector (updated) and a condition
latent vector (frozen). A sweep feeds the five-block neighbourhood of every
subdomain through the flux autoencoder and keeps the centre solution part of
the output. Point-Jacobi sweeps read only the previous iterate and run as a
single batched forward pass. Gauss-Seidel sweeps visit subdomains in index
order and read neighbours that were already updated in the same sweep.

The iteration residual is ``||eta_new - eta_old||_2 / sqrt(n_subdomains)``
over all solution latents.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autoencoders import FluxAutoencoder, PatchAutoencoder, assemble_all, assemble_one
from .fdm import BoundarySpec, FdmConfig, solve_poisson
from .grid import Decomposition, DimensionError, GridSpec, Normalizer, ScalarField, decompose, prolong, restrict, stitch_array

METHODS = ("pj", "gs")
DISTRIBUTIONS = ("uniform", "normal", "laplace", "logistic", "gumbel", "gamma")


class LatentDivergenceError(FloatingPointError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class StabilityWarning(RuntimeWarning):
    pass


# -- model container -------------------------------------------------------------


@dataclass
class LatentModel:
    """Everything the solver needs: the three autoencoder kinds plus scalings.

    ``spacing`` is the cell size ``(hx, hy)`` of the training grid; the solver
    refuses grids with a different spacing.
    """

    solution_ae: PatchAutoencoder
    condition_aes: tuple
    flux_ae: FluxAutoencoder
    solution_norm: Normalizer
    condition_norms: tuple
    spacing: tuple
    inactive_zero: bool = False

    def __post_init__(self):
        self.condition_aes = tuple(self.condition_aes)
        self.condition_norms = tuple(self.condition_norms)
        if len(self.condition_aes) != len(self.condition_norms):
            raise ValueError("one normalizer per condition autoencoder is required")
        sizes = {self.solution_ae.patch_size} | {ae.patch_size for ae in self.condition_aes}
        if len(sizes) != 1:
            raise ValueError(f"all autoencoders must share a patch size, got {sorted(sizes)}")
        if self.d_sol_total != self.flux_ae.d_sol_total or self.d_cond != self.flux_ae.d_cond:
            raise ValueError("flux autoencoder widths do not match the patch autoencoders")

    @property
    def s(self) -> int:
        return int(self.solution_ae.patch_size)

    @property
    def n_vars(self) -> int:
        return int(self.solution_ae.n_channels)

    @property
    def d_sol_total(self) -> int:
        return int(self.solution_ae.latent_dim)

    @property
    def d_cond(self) -> int:
        return int(sum(ae.latent_dim for ae in self.condition_aes))

    def check_grid(self, grid: GridSpec) -> Decomposition:
        hx, hy = self.spacing
        if not (math.isclose(grid.hx, hx, rel_tol=1e-9) and math.isclose(grid.hy, hy, rel_tol=1e-9)):
            raise ValueError(
                f"grid spacing ({grid.hx:g}, {grid.hy:g}) differs from the training spacing "
                f"({hx:g}, {hy:g}); subdomains must keep their physical size")
        return Decomposition(grid, self.s)

    def encode_conditions(self, conditions, decomposition: Decomposition) -> np.ndarray:
        conditions = list(conditions)
        if len(conditions) != len(self.condition_aes):
            raise ValueError(f"expected {len(self.condition_aes)} condition fields, got {len(conditions)}")
        blocks = []
        for f, ae, nz in zip(conditions, self.condition_aes, self.condition_norms):
            raw = np.asarray(f, dtype=np.float64)
            if raw.shape != decomposition.grid.shape:
                raise ValueError(f"condition shape {raw.shape} does not match grid {decomposition.grid.shape}")
            patches = decompose(raw, self.s)
            mask = np.any(patches != 0.0, axis=(1, 2)) if self.inactive_zero else None
            blocks.append(ae.transform(nz.normalize(patches), mask=mask))
        return np.concatenate(blocks, axis=1)

    def encode_solution(self, normalized: np.ndarray) -> np.ndarray:
        """Latents of a normalised ``(n_vars, ny, nx)`` field."""
        a = np.asarray(normalized, dtype=np.float64)
        if a.ndim == 2:
            a = a[None]
        patches = np.moveaxis(decompose(a, self.s), 0, 1)  # (n_sub, n_vars, s, s)
        return self.solution_ae.transform(patches)

    def decode_solution(self, sol: np.ndarray, decomposition: Decomposition) -> np.ndarray:
        """Normalised ``(n_vars, ny, nx)`` field from per-subdomain latents."""
        patches = self.solution_ae.inverse_transform(sol)
        return stitch_array(np.moveaxis(patches, 1, 0), decomposition.cx, decomposition.cy)

    def denormalize(self, normalized: np.ndarray, grid: GridSpec) -> list[ScalarField]:
        return [ScalarField(grid, self.solution_norm.denormalize(normalized[v], var=v))
                for v in range(self.n_vars)]

    def normalize_solution(self, fields) -> np.ndarray:
        """``(n_vars, ny, nx)`` truth in model units; a bare 2-D array is accepted for one variable."""
        if not isinstance(fields, (list, tuple)) and np.ndim(fields) == 2:
            fields = [fields]
        if len(fields) != self.n_vars:
            raise DimensionError(f"expected {self.n_vars} solution fields, got {len(fields)}")
        return np.stack([self.solution_norm.normalize(np.asarray(f, dtype=np.float64), var=v)
                         for v, f in enumerate(fields)])


# -- state and initialisation ----------------------------------------------------


class LatentState:
    """Per-subdomain solution latents (mutable) and condition latents (read-only)."""

    def __init__(self, decomposition: Decomposition, sol, cond):
        sol = np.array(sol, dtype=np.float64)
        cond = np.array(cond, dtype=np.float64)
        n = decomposition.n_subdomains
        if sol.ndim != 2 or cond.ndim != 2 or len(sol) != n or len(cond) != n:
            raise ValueError(f"latent arrays must have {n} rows")
        cond.setflags(write=False)
        self.decomposition = decomposition
        self.sol = sol
        self.cond = cond

    @property
    def n_subdomains(self) -> int:
        return self.decomposition.n_subdomains

    def copy(self) -> "LatentState":
        s = LatentState.__new__(LatentState)
        s.decomposition = self.decomposition
        s.sol = self.sol.copy()
        s.cond = self.cond
        return s

    def assemble(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n_subdomains:
            raise IndexError(f"subdomain {k} out of range")
        return assemble_one(self.sol, self.cond, self.decomposition.neighbors, k)

    def assemble_all(self) -> np.ndarray:
        return assemble_all(self.sol, self.cond, self.decomposition.neighbors)


@dataclass(frozen=True)
class ZeroInit:
    def field(self, grid: GridSpec, model: LatentModel) -> np.ndarray:
        return np.zeros((model.n_vars,) + grid.shape)


@dataclass(frozen=True)
class UniformInit:
    value: float = 0.0

    def field(self, grid, model):
        return np.full((model.n_vars,) + grid.shape, float(self.value))


@dataclass(frozen=True)
class RandomInit:
    """Independent per-cell noise in normalised units.

    Uniform draws span ``[-amplitude, amplitude]``; the unbounded families are
    centred at zero with scale ``amplitude / 3``.
    """

    distribution: str = "uniform"
    amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if not self.amplitude >= 0:
            raise ValueError("amplitude must be non-negative")

    def field(self, grid, model):
        rng = np.random.default_rng(int(self.seed))
        shape = (model.n_vars,) + grid.shape
        a, sc = float(self.amplitude), float(self.amplitude) / 3.0
        d = self.distribution
        if d == "uniform":
            return rng.uniform(-a, a, shape)
        if d == "normal":
            return rng.normal(0.0, sc, shape)
        if d == "laplace":
            return rng.laplace(0.0, sc, shape)
        if d == "logistic":
            return rng.logistic(0.0, sc, shape)
        if d == "gumbel":
            return rng.gumbel(0.0, sc, shape) - sc * np.euler_gamma
        return rng.gamma(2.0, sc, shape) - 2.0 * sc


@dataclass(frozen=True)
class CoarseInit:
    """Start from a coarse physical solution, prolonged to the target grid.

    ``fields`` holds one coarse :class:`ScalarField` per solution variable;
    ``noise`` adds uniform noise of that amplitude in normalised units.
    """

    fields: tuple
    noise: float = 0.0
    seed: int = 0

    def field(self, grid, model):
        if len(self.fields) != model.n_vars:
            raise ValueError(f"coarse init needs {model.n_vars} fields")
        out = []
        for v, f in enumerate(self.fields):
            factor = grid.nx // f.grid.nx
            if factor * f.grid.nx != grid.nx or factor * f.grid.ny != grid.ny:
                raise ValueError("coarse grid does not divide the target grid")
            out.append(model.solution_norm.normalize(prolong(f, factor).values, var=v))
        out = np.stack(out)
        if self.noise:
            out = out + np.random.default_rng(int(self.seed)).uniform(-self.noise, self.noise, out.shape)
        return out


def coarse_poisson_init(grid: GridSpec, source, coarse_n: int = 64, bc: BoundarySpec = BoundarySpec(),
                        noise: float = 0.0, seed: int = 0) -> CoarseInit:
    """Coarse-grid FDM solve of a linear Poisson problem wrapped as an init mode."""
    factor = grid.nx // int(coarse_n)
    if factor < 1 or grid.nx % coarse_n or grid.ny % factor:
        raise ValueError(f"coarse size {coarse_n} does not divide {grid.nx}x{grid.ny}")
    coarse_src = restrict(ScalarField(grid, np.asarray(source, dtype=np.float64)), factor)
    cgrid = GridSpec(coarse_src.grid.nx, coarse_src.grid.ny, grid.lx, grid.ly)
    u = solve_poisson(cgrid, coarse_src.values, bc, FdmConfig(method="direct"))
    return CoarseInit((u,), noise, seed)


def initialize_state(model: LatentModel, conditions, grid: GridSpec, init=ZeroInit()) -> LatentState:
    d = model.check_grid(grid)
    cond = model.encode_conditions(conditions, d)
    sol = model.encode_solution(init.field(grid, model))
    return LatentState(d, sol, cond)


# -- sweeps -----------------------------------------------------------------------


def _check_finite(a, where):
    if not np.all(np.isfinite(a)):
        raise LatentDivergenceError(f"non-finite flux output during {where}")


def pj_sweep(state: LatentState, flux, damping: float = 1.0) -> np.ndarray:
    """New solution latents from the previous iterate only; ``state`` is untouched."""
    target = flux.apply_center(state.assemble_all())
    _check_finite(target, "point-Jacobi sweep")
    if damping == 1.0:
        return target
    return (1.0 - damping) * state.sol + damping * target


def gs_sweep(state: LatentState, flux, damping: float = 1.0) -> np.ndarray:
    """Lexicographic in-place sweep; returns ``state.sol``."""
    nb = state.decomposition.neighbors
    for k in range(state.n_subdomains):
        target = flux.apply_center(assemble_one(state.sol, state.cond, nb, k))
        _check_finite(target, f"Gauss-Seidel update of subdomain {k}")
        state.sol[k] = target if damping == 1.0 else (1.0 - damping) * state.sol[k] + damping * target
    return state.sol


# -- solve --------------------------------------------------------------------------


@dataclass(frozen=True)
class SolveConfig:
    method: str = "pj"
    tol: float = 1e-8
    max_iters: int = 5000
    damping: float = 1.0
    snapshot_every: int = 0
    check_stability: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if int(self.snapshot_every) < 0:
            raise ValueError("snapshot_every must be non-negative")


@dataclass
class SolveReport:
    iterations: int = 0
    residuals: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0
    snapshot_iterations: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    stability: float | None = None

    def residual_rows(self):
        return [(i + 1, e, w) for i, (e, w) in enumerate(zip(self.residuals, self.wall_ms))]


@dataclass
class SolveResult:
    fields: list
    normalized: np.ndarray
    state: LatentState
    report: SolveReport


def _iteration_norm(delta: np.ndarray) -> float:
    return float(np.linalg.norm(delta) / math.sqrt(len(delta)))


def solve(state: LatentState, model: LatentModel, cfg: SolveConfig = SolveConfig()) -> SolveResult:
    """Iterate sweeps until the latent change drops below ``cfg.tol``.

    ``state`` is advanced in place. When the iteration cap is hit the state
    with the smallest recorded change is decoded and ``converged`` is false.
    """
    rep = SolveReport()
    d = state.decomposition
    every = int(cfg.snapshot_every)
    if every:
        rep.snapshot_iterations.append(0)
        rep.snapshots.append(model.decode_solution(state.sol, d))
    if cfg.check_stability:
        rep.stability = estimate_stability(model.flux_ae, state.assemble_all()).estimate
    t0 = time.perf_counter()
    best = (math.inf, None)
    for it in range(1, int(cfg.max_iters) + 1):
        old = state.sol.copy()
        if cfg.method == "pj":
            state.sol[...] = pj_sweep(state, model.flux_ae, cfg.damping)
        else:
            gs_sweep(state, model.flux_ae, cfg.damping)
        eps = _iteration_norm(state.sol - old)
        rep.residuals.append(eps)
        rep.wall_ms.append(1e3 * (time.perf_counter() - t0))
        rep.iterations = it
        if not math.isfinite(eps):
            raise LatentDivergenceError(f"iteration residual became non-finite at iteration {it}", rep)
        if eps < best[0]:
            best = (eps, state.sol.copy())
        if every and it % every == 0:
            rep.snapshot_iterations.append(it)
            rep.snapshots.append(model.decode_solution(state.sol, d))
        if eps < cfg.tol:
            rep.converged = True
            break
    rep.wall_time = time.perf_counter() - t0
    if not rep.converged and best[1] is not None:
        state.sol[...] = best[1]
    normalized = model.decode_solution(state.sol, d)
    if every:
        rep.snapshot_iterations.append(rep.iterations)
        rep.snapshots.append(normalized)
    if cfg.check_stability:
        final = estimate_stability(model.flux_ae, state.assemble_all()).estimate
        rep.stability = max(rep.stability, final)
        if rep.stability >= 1.0:
            warnings.warn(f"flux map Jacobian norm {rep.stability:.3f} is not below one; "
                          "the iteration may not contract", StabilityWarning, stacklevel=2)
    return SolveResult(model.denormalize(normalized, d.grid), normalized, state, rep)


def solve_fields(model: LatentModel, conditions, grid: GridSpec, cfg: SolveConfig = SolveConfig(),
                 init=ZeroInit()) -> SolveResult:
    return solve(initialize_state(model, conditions, grid, init), model, cfg)


def solve_extended(model: LatentModel, conditions, grid: GridSpec, cfg: SolveConfig = SolveConfig(),
                   init=ZeroInit()) -> SolveResult:
    """Solve on any grid tiled by the trained subdomain size at the trained spacing.

    Nothing is retrained; a larger grid only means more subdomains.
    """
    return solve_fields(model, conditions, grid, cfg, init)


def record_evolution(state: LatentState, model: LatentModel, every: int,
                     cfg: SolveConfig = SolveConfig()) -> SolveResult:
    """Solve while keeping decoded snapshots at iterations 0, k, 2k, ... and the final one."""
    if int(every) < 1:
        raise ValueError("snapshot interval must be at least 1")
    kw = {**cfg.__dict__, "snapshot_every": int(every)}
    return solve(state, model, SolveConfig(**kw))


# -- stability ------------------------------------------------------------------------


@dataclass
class StabilityReport:
    estimate: float
    per_sample: np.ndarray
    converged: bool


def _top_singular_value(J: np.ndarray, max_steps: int, tol: float, seed: int = 0):
    G = J @ J.T
    v = np.random.default_rng(seed).standard_normal(len(G))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_steps):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        new = float(v @ w)
        v = w / nw
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return math.sqrt(max(new, 0.0)), True
        lam = new
    return math.sqrt(max(lam, 0.0)), False


def estimate_stability(flux, samples, max_steps: int = 200, tol: float = 1e-12) -> StabilityReport:
    """Largest singular value of d(centre solution out)/d(all solution inputs).

    ``samples`` are assembled neighbourhood vectors (one per row). The Jacobian
    rows come from exact reverse-mode products in the flux network's
    standardised coordinates (raw latent slots differ in spread by orders of
    magnitude, which would swamp the norm). Power iteration on ``J J^T`` gives
    the spectral norm; the maximum over samples is reported.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("at least one sample is required")
    vals, ok = [], True
    for x in X:
        sigma, conv = _top_singular_value(flux.center_jacobian(x, standardized=True), max_steps, tol)
        vals.append(sigma)
        ok &= conv
    if not ok:
        warnings.warn("power iteration did not settle; reporting the last estimate",
                      StabilityWarning, stacklevel=2)
    vals = np.array(vals)
    return StabilityReport(float(vals.max()), vals, bool(ok))
