"""Metrics, experiment suites and ablation drivers.

All errors are measured on normalised fields (the solution scaling of the
trained model), so numbers are comparable across variables.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .autoencoders import FluxAutoencoder, PatchAutoencoder, assemble_all
from .datasets import Dataset, generate
from .engine import (
    CoarseInit,
    LatentModel,
    RandomInit,
    SolveConfig,
    ZeroInit,
    coarse_poisson_init,
    estimate_stability,
    initialize_state,
    record_evolution,
    solve,
)
from .grid import Decomposition, Normalizer, decompose


@dataclass(frozen=True)
class MetricSet:
    mae: float
    linf: float
    rel_l2: float

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred, truth) -> MetricSet:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} differs from truth {t.shape}")
    d = p - t
    nt = float(np.linalg.norm(t.ravel()))
    if nt == 0.0:
        raise ValueError("relative L2 error is undefined for an all-zero truth")
    return MetricSet(float(np.mean(np.abs(d))), float(np.max(np.abs(d))),
                     float(np.linalg.norm(d.ravel()) / nt))


# -- model training pipeline -------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    subdomain: int = 32
    latent: int = 11
    base_channels: int = 8
    dense_width: int = 64
    solution_skip: str = "plane"
    condition_skip: str = "mean"
    ae_epochs: int = 60
    ae_batch_size: int = 32
    ae_lr: float = 2e-3
    flux_hidden: int = 128
    flux_bottleneck: int = 64
    flux_epochs: int = 60
    flux_batch_size: int = 64
    flux_lr: float = 1e-3
    flux_scaling: str = "feature"
    flux_condition_weight: float = 1.0
    flux_augment: str = "dihedral"
    seed: int = 0


def _patches(fields: np.ndarray, s: int) -> np.ndarray:
    """``(n, C, ny, nx)`` to ``(n * n_sub, C, s, s)``."""
    p = decompose(fields, s)  # (n, C, n_sub, s, s)
    return np.moveaxis(p, 2, 1).reshape((-1, fields.shape[1], s, s))


def train_patch_autoencoders(train: Dataset, pc: PipelineConfig):
    sol_norm = Normalizer.fit(train.solutions, n_vars=train.solutions.shape[1])
    src_norm = Normalizer.fit(train.sources)
    ae_kw = dict(patch_size=pc.subdomain, base_channels=pc.base_channels, dense_width=pc.dense_width,
                 max_epochs=pc.ae_epochs, batch_size=pc.ae_batch_size, lr=pc.ae_lr)
    n_vars = train.solutions.shape[1]
    sol_ae = PatchAutoencoder(n_channels=n_vars, latent_dim=pc.latent * n_vars, skip=pc.solution_skip,
                              seed=pc.seed, **ae_kw)
    sol_ae.fit(_patches(sol_norm.normalize(train.solutions, var=None), pc.subdomain))
    src_ae = PatchAutoencoder(n_channels=1, latent_dim=pc.latent, skip=pc.condition_skip,
                              seed=pc.seed + 1, **ae_kw)
    src_ae.fit(_patches(src_norm.normalize(train.sources)[:, None], pc.subdomain))
    return sol_ae, src_ae, sol_norm, src_norm


def dihedral(fields: np.ndarray, t: int) -> np.ndarray:
    """Element ``t`` (0..7) of the square's symmetry group acting on the last two axes."""
    out = np.rot90(fields, t % 4, axes=(-2, -1))
    return np.ascontiguousarray(out[..., ::-1] if t >= 4 else out)


def flux_training_inputs(train: Dataset, sol_ae, src_ae, sol_norm, src_norm, s: int,
                         augment: str = "none") -> np.ndarray:
    """Neighbourhood vectors of every subdomain of every encoded training solution.

    ``augment="dihedral"`` also encodes the 7 rotated and mirrored copies of each
    (solution, source) pair. On a square domain with the same boundary condition
    on every edge these are exact solutions too, so the flux network sees 8x the
    neighbourhoods at no labelling cost. Callers with direction-dependent physics
    should leave it off.
    """
    if augment not in ("none", "dihedral"):
        raise ValueError(f"augment must be 'none' or 'dihedral', got {augment!r}")
    if augment == "dihedral" and train.grid.nx != train.grid.ny:
        raise ValueError("dihedral augmentation needs a square grid")
    dec = Decomposition(train.grid, s)
    n_sub = dec.n_subdomains
    sols = sol_norm.normalize(train.solutions, var=None)
    srcs = src_norm.normalize(train.sources)[:, None]
    out = []
    for t in range(8 if augment == "dihedral" else 1):
        zs = sol_ae.transform(_patches(dihedral(sols, t), s)).reshape(len(train), n_sub, -1)
        zc = src_ae.transform(_patches(dihedral(srcs, t), s)).reshape(len(train), n_sub, -1)
        out.extend(assemble_all(zs[i], zc[i], dec.neighbors) for i in range(len(train)))
    return np.concatenate(out)


def train_flux(X, sol_ae, src_ae, pc: PipelineConfig, bottleneck: int | None = None) -> FluxAutoencoder:
    flux = FluxAutoencoder(d_sol=sol_ae.latent_dim // sol_ae.n_channels, n_vars=sol_ae.n_channels,
                           d_cond=src_ae.latent_dim, hidden=pc.flux_hidden,
                           bottleneck=pc.flux_bottleneck if bottleneck is None else bottleneck,
                           scaling=pc.flux_scaling, condition_weight=pc.flux_condition_weight,
                           max_epochs=pc.flux_epochs, batch_size=pc.flux_batch_size, lr=pc.flux_lr,
                           seed=pc.seed + 2)
    return flux.fit(X)


def train_pipeline(train: Dataset, pc: PipelineConfig = PipelineConfig()) -> LatentModel:
    sol_ae, src_ae, sol_norm, src_norm = train_patch_autoencoders(train, pc)
    X = flux_training_inputs(train, sol_ae, src_ae, sol_norm, src_norm, pc.subdomain, pc.flux_augment)
    flux = train_flux(X, sol_ae, src_ae, pc)
    return LatentModel(sol_ae, (src_ae,), flux, sol_norm, (src_norm,), (train.grid.hx, train.grid.hy))


# -- evaluation suites ---------------------------------------------------------------


@dataclass
class CaseResult:
    case: int
    mae: tuple
    iterations: int
    converged: bool
    wall_time: float
    final_residual: float

    @property
    def mae_all(self) -> float:
        return float(np.mean(self.mae))


def run_case(model: LatentModel, source, truth, grid, cfg: SolveConfig, init=ZeroInit(),
             case: int = 0, keep=False):
    state = initialize_state(model, [source], grid, init)
    res = solve(state, model, cfg)
    t = model.normalize_solution(truth)
    mae = tuple(float(np.mean(np.abs(res.normalized[v] - t[v]))) for v in range(model.n_vars))
    out = CaseResult(case, mae, res.report.iterations, res.report.converged, res.report.wall_time,
                     res.report.residuals[-1])
    return (out, res) if keep else out


def evaluate_solver(model: LatentModel, ds: Dataset, cfg: SolveConfig = SolveConfig(),
                    init_factory=None) -> list[CaseResult]:
    out = []
    for i in range(len(ds)):
        init = init_factory(i) if init_factory else ZeroInit()
        out.append(run_case(model, ds.sources[i], ds.solutions[i], ds.grid, cfg, init, case=i))
    return out


def baseline_mae(fcnn, ds: Dataset, model: LatentModel) -> list[float]:
    pred = fcnn.predict(ds.sources)
    return [float(np.mean(np.abs(model.normalize_solution(pred[i]) - model.normalize_solution(ds.solutions[i]))))
            for i in range(len(ds))]


def ood_gaussian_sweep(model: LatentModel, fcnn, ks=(30, 40, 50, 60), n: int = 10, seed: int = 0,
                       cfg: SolveConfig = SolveConfig(), kind: str = "poisson", grid=None) -> list[dict]:
    """Mean error per fixed Gaussian count for the latent solver and the baseline."""
    grid = grid or _grid_from_model(model)
    rows = []
    for k in ks:
        ds = generate(kind, grid, n, seed, split="ood", fixed_k=int(k))
        cs = evaluate_solver(model, ds, cfg)
        rows.append({"k": int(k), "comlsim_mae": float(np.mean([c.mae_all for c in cs])),
                     "baseline_mae": float(np.mean(baseline_mae(fcnn, ds, model))) if fcnn else math.nan,
                     "converged": int(sum(c.converged for c in cs))})
    return rows


def _grid_from_model(model: LatentModel):
    from .grid import GridSpec
    hx, hy = model.spacing
    n = round(1.0 / hx)
    return GridSpec(n, round(1.0 / hy))


def robustness_suite(model: LatentModel, source, truth, grid, n: int = 25,
                     distributions=("uniform", "normal", "gamma", "laplace", "gumbel", "logistic"),
                     cfg: SolveConfig = SolveConfig(), seed: int = 0) -> dict:
    """Solve one problem from ``n`` random initial states drawn round-robin from ``distributions``."""
    runs, finals = [], []
    for i in range(n):
        dist = distributions[i % len(distributions)]
        init = RandomInit(dist, 1.0, seed + i)
        c, res = run_case(model, source, truth, grid, cfg, init, case=i, keep=True)
        runs.append({"distribution": dist, "converged": c.converged, "iterations": c.iterations,
                     "mae": c.mae_all, "residuals": res.report.residuals})
        finals.append(res.normalized)
    pair = np.zeros((n, n))
    for a, b in itertools.combinations(range(n), 2):
        pair[a, b] = pair[b, a] = float(np.mean(np.abs(finals[a] - finals[b])))
    return {"runs": runs, "pairwise_mae": pair}


def pj_vs_gs_report(model: LatentModel, ds: Dataset, cfg: SolveConfig = SolveConfig()) -> dict:
    out = {}
    for m in ("pj", "gs"):
        c = SolveConfig(**{**cfg.__dict__, "method": m})
        out[m] = evaluate_solver(model, ds, c)
    return out


def coarse_coupling_report(model: LatentModel, ds: Dataset, noise_levels=(0.0, 0.1, 0.25, 0.5),
                           coarse_n: int = 64, cfg: SolveConfig = SolveConfig(), seed: int = 0) -> dict:
    """Iterations and final error from a zero start and from noisy coarse-grid starts."""
    out = {"zero": evaluate_solver(model, ds, cfg)}
    for lvl in noise_levels:
        out[f"coarse_{lvl:g}"] = evaluate_solver(
            model, ds, cfg,
            init_factory=lambda i, lvl=lvl: coarse_poisson_init(ds.grid, ds.sources[i], coarse_n,
                                                                noise=lvl, seed=seed + i))
    return out


def error_trajectory(model: LatentModel, source, truth, grid, every: int = 1,
                     cfg: SolveConfig = SolveConfig(), init=ZeroInit()):
    """Snapshot iterations and normalised MAE against the truth at each snapshot."""
    state = initialize_state(model, [source], grid, init)
    res = record_evolution(state, model, every, cfg)
    t = model.normalize_solution(truth)
    errs = [float(np.mean(np.abs(s - t))) for s in res.report.snapshots]
    return res.report.snapshot_iterations, errs, res


def non_increasing_after(errors, start_index: int, rtol: float = 1e-9) -> bool:
    e = np.asarray(errors[start_index:])
    return bool(np.all(e[1:] <= e[:-1] * (1 + rtol) + 1e-15))


def ablate_flux_bottleneck(model: LatentModel, X: np.ndarray, ds: Dataset, values,
                           pc: PipelineConfig = PipelineConfig(), cfg: SolveConfig = SolveConfig()) -> list[dict]:
    """Retrain the flux autoencoder per bottleneck width and re-solve ``ds``."""
    rows = []
    src_ae = model.condition_aes[0]
    for b in values:
        flux = train_flux(X, model.solution_ae, src_ae, pc, bottleneck=int(b))
        m = LatentModel(model.solution_ae, model.condition_aes, flux, model.solution_norm,
                        model.condition_norms, model.spacing)
        cases, samples = [], []
        for i in range(len(ds)):
            c, res = run_case(m, ds.sources[i], ds.solutions[i], ds.grid, cfg, case=i, keep=True)
            cases.append(c)
            samples.append(res.state.assemble_all())
        stab = estimate_stability(flux, np.concatenate(samples)).estimate
        rows.append({"bottleneck": int(b), "mae": float(np.mean([c.mae_all for c in cases])),
                     "iterations": float(np.median([c.iterations for c in cases])),
                     "converged": int(sum(c.converged for c in cases)), "stability": stab,
                     "unstable": bool(stab >= 1.0)})
    return rows


def equal_compression_latent(s: int, ref_s: int = 32, ref_latent: int = 11, minimum: int = 1) -> int:
    return max(minimum, int(round(ref_latent * (s / ref_s) ** 2)))


def ablate_subdomain_size(train: Dataset, test: Dataset, sizes=(16, 32, 64),
                          pc: PipelineConfig = PipelineConfig(), cfg: SolveConfig = SolveConfig()) -> list[dict]:
    """Full retrain per subdomain size with the latent width scaled to keep ``s^2 / d`` fixed."""
    rows = []
    for s in sizes:
        skip_min = {"none": 0, "mean": 1, "plane": 3}
        lo = max(skip_min[pc.solution_skip], skip_min[pc.condition_skip]) + 1
        d = equal_compression_latent(s, pc.subdomain, pc.latent, lo)
        sub = PipelineConfig(**{**pc.__dict__, "subdomain": int(s), "latent": d})
        model = train_pipeline(train, sub)
        cases = evaluate_solver(model, test, cfg)
        rows.append({"subdomain": int(s), "latent": d, "compression": s * s / d,
                     "mae": float(np.mean([c.mae_all for c in cases])),
                     "iterations": float(np.median([c.iterations for c in cases])),
                     "converged": int(sum(c.converged for c in cases))})
    return rows


def result_rows(experiment_id: str, cases: list[CaseResult], prefix: str = "") -> list[tuple]:
    rows = []
    for c in cases:
        for v, m in enumerate(c.mae):
            rows.append((experiment_id, c.case, f"{prefix}mae_{v}", m))
        rows.append((experiment_id, c.case, f"{prefix}iterations", c.iterations))
        rows.append((experiment_id, c.case, f"{prefix}converged", int(c.converged)))
    return rows
