"""Ground-truth datasets: sampled sources paired with finite-difference solutions."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fdm import NONLINEAR_EPS, BoundarySpec, FdmConfig, solve_nonlinear_poisson, solve_poisson
from .grid import GridSpec, ScalarField
from .io import FormatError, read_field, read_manifest, write_field, write_manifest
from .sampling import GmmSpec, sample_gmm_fixed_k, sample_gmm_source

SPLITS = {"train": 0, "test": 1, "ood": 2, "extended": 3}
VARIABLES = {"poisson": ("u",), "nonlinear": ("u", "v")}
BOUNDARY_NOTE = "homogeneous Dirichlet on all edges (assumed default)"


def derive_seed(seed: int, split: str, index: int, extra: int = 0) -> int:
    """Independent 64-bit seed for one sample."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(SPLITS[split], int(index), int(extra)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class Dataset:
    grid: GridSpec
    kind: str
    sources: np.ndarray   # (n, ny, nx)
    solutions: np.ndarray  # (n, n_vars, ny, nx)
    seeds: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sources = np.asarray(self.sources, dtype=np.float64)
        self.solutions = np.asarray(self.solutions, dtype=np.float64)
        if self.solutions.ndim == 3:
            self.solutions = self.solutions[:, None]
        if len(self.sources) != len(self.solutions) or len(self.seeds) != len(self.sources):
            raise ValueError("sources, solutions and seeds must have equal length")

    def __len__(self):
        return len(self.sources)

    @property
    def variables(self) -> tuple:
        return VARIABLES[self.kind]

    def subset(self, idx) -> "Dataset":
        idx = np.atleast_1d(idx)
        return Dataset(self.grid, self.kind, self.sources[idx], self.solutions[idx],
                       tuple(self.seeds[i] for i in idx), dict(self.meta))


def gmm_spec_for(kind: str, grid: GridSpec, k_max: int = 30, sigma=None) -> GmmSpec:
    if sigma:
        return GmmSpec(k_max=k_max, sigma_range=tuple(sigma))
    # widths follow cell size, so a larger domain at fixed spacing keeps them
    n_per_unit = grid.nx / grid.lx
    return GmmSpec.for_resolution(n_per_unit, nonlinear=(kind == "nonlinear"), k_max=k_max)


def solve_truth(kind: str, grid: GridSpec, source, fdm: FdmConfig = FdmConfig(method="direct")):
    """FDM solution(s) for a source, stacked ``(n_vars, ny, nx)``."""
    if kind == "poisson":
        return solve_poisson(grid, source, BoundarySpec(), fdm).values[None]
    u, v = solve_nonlinear_poisson(grid, source, BoundarySpec(), fdm)
    return np.stack([u.values, v.values])


def generate(kind: str, grid: GridSpec, n: int, seed: int, split: str = "train", k_max: int = 30,
             sigma=None, fixed_k: int | None = None, fdm: FdmConfig = FdmConfig(method="direct"),
             spec_grid: GridSpec | None = None) -> Dataset:
    """Draw ``n`` sources and solve each one.

    ``fixed_k`` switches to exactly that many Gaussians. ``spec_grid`` sets
    the grid the width range is derived from (defaults to ``grid``).
    """
    if kind not in VARIABLES:
        raise ValueError(f"unknown problem kind {kind!r}")
    base = gmm_spec_for(kind, spec_grid or grid, k_max, sigma)
    sources, sols, seeds = [], [], []
    for i in range(int(n)):
        s = derive_seed(seed, split, i, fixed_k or 0)
        spec = base.with_seed(s)
        f = sample_gmm_fixed_k(grid, spec, fixed_k) if fixed_k else sample_gmm_source(grid, spec)
        sources.append(f.values)
        sols.append(solve_truth(kind, grid, f, fdm))
        seeds.append(s)
    shape = (0,) + grid.shape
    meta = {"boundary": BOUNDARY_NOTE, "k_max": int(base.k_max), "fixed_k": int(fixed_k or 0),
            "sigma_range": [float(x) for x in base.sigma_range], "split": split, "base_seed": str(seed)}
    if kind == "nonlinear":
        meta["nonlinear_eps"] = NONLINEAR_EPS
    return Dataset(grid, kind, np.array(sources) if sources else np.zeros(shape),
                   np.array(sols) if sols else np.zeros((0, len(VARIABLES[kind])) + grid.shape),
                   tuple(seeds), meta)


def save_dataset(ds: Dataset, directory, split: str, extra_manifest: dict | None = None) -> Path:
    d = Path(directory) / split
    for i in range(len(ds)):
        write_field(d / f"{i:04d}_source.cmlf", ScalarField(ds.grid, ds.sources[i]))
        for v, name in enumerate(ds.variables):
            write_field(d / f"{i:04d}_{name}.cmlf", ScalarField(ds.grid, ds.solutions[i, v]))
    manifest = {"kind": ds.kind, "n": len(ds), "nx": ds.grid.nx, "ny": ds.grid.ny,
                "lx": ds.grid.lx, "ly": ds.grid.ly, "seeds": [str(s) for s in ds.seeds]}
    manifest.update(ds.meta)
    manifest.update(extra_manifest or {})
    write_manifest(d / "manifest.json", manifest)
    return d


def load_dataset(directory, split: str) -> Dataset:
    d = Path(directory) / split
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {d}")
    m = read_manifest(d / "manifest.json")
    grid = GridSpec(m["nx"], m["ny"], m["lx"], m["ly"])
    names = VARIABLES[m["kind"]]
    src, sol = [], []
    for i in range(m["n"]):
        f = read_field(d / f"{i:04d}_source.cmlf")
        if f.grid != grid:
            raise FormatError(f"sample {i} grid does not match the manifest")
        src.append(f.values)
        sol.append(np.stack([read_field(d / f"{i:04d}_{v}.cmlf").values for v in names]))
    keys = ("boundary", "k_max", "fixed_k", "sigma_range", "split", "base_seed", "nonlinear_eps")
    return Dataset(grid, m["kind"], np.array(src), np.array(sol), tuple(int(s) for s in m["seeds"]),
                   {k: m[k] for k in keys if k in m})
