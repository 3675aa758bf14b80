"""Command-line driver.

Every subcommand works inside one output directory::

    data/{train,test}/        sampled sources and reference solutions
    models/ae.cmlm            patch autoencoders and scalings
    models/model.cmlm         the above plus the flux autoencoder
    <command>/                artifacts of solve, eval, ablate, stability, evolve

Exit status: 0 on success, 2 on invalid input or missing prerequisites,
3 when a latent solve fails to converge.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import FcnnBaseline
from .config import ConfigError, RunConfig, load_config
from .datasets import generate, load_dataset, save_dataset
from .engine import (
    LatentModel,
    RandomInit,
    SolveConfig,
    UniformInit,
    ZeroInit,
    coarse_poisson_init,
    estimate_stability,
    initialize_state,
    record_evolution,
    solve,
)
from .evaluation import (
    PipelineConfig,
    ablate_flux_bottleneck,
    ablate_subdomain_size,
    baseline_mae,
    coarse_coupling_report,
    evaluate_solver,
    flux_training_inputs,
    ood_gaussian_sweep,
    pj_vs_gs_report,
    result_rows,
    robustness_suite,
    train_flux,
    train_patch_autoencoders,
)
from .grid import GridSpec, ScalarField
from .io import (
    FormatError,
    atomic_write_text,
    bundle_hash,
    export_field_image,
    write_field,
    write_manifest,
    write_residual_csv,
    write_result_csv,
)
from .persistence import load_autoencoders, load_model, save_autoencoders, save_model

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3


class UsageError(Exception):
    pass


# -- helpers ---------------------------------------------------------------------------


def _paths(out: Path) -> dict:
    return {"data": out / "data", "ae": out / "models" / "ae.cmlm", "model": out / "models" / "model.cmlm"}


def _pipeline_config(cfg: RunConfig) -> PipelineConfig:
    a, f = cfg.ae, cfg.flux
    return PipelineConfig(subdomain=a.subdomain, latent=a.latent, base_channels=a.base_channels,
                          dense_width=a.dense_width, solution_skip=a.solution_skip,
                          condition_skip=a.condition_skip, ae_epochs=a.epochs, ae_batch_size=a.batch_size,
                          ae_lr=a.lr, flux_hidden=f.hidden, flux_bottleneck=f.bottleneck,
                          flux_epochs=f.epochs, flux_batch_size=f.batch_size, flux_lr=f.lr,
                          flux_scaling=f.scaling, flux_condition_weight=f.condition_weight,
                          flux_augment=f.augment,
                          seed=cfg.run.seed % 2 ** 31)


def _solve_config(cfg: RunConfig) -> SolveConfig:
    s = cfg.solve
    return SolveConfig(method=s.method, tol=s.tol, max_iters=s.max_iters, damping=s.damping,
                       snapshot_every=s.snapshots)


def _grid(cfg: RunConfig) -> GridSpec:
    p = cfg.problem
    return GridSpec(p.n, p.n, p.length, p.length)


def _sigma(cfg: RunConfig):
    p = cfg.problem
    return (p.sigma_min, p.sigma_max) if p.sigma_max > 0 else None


def _require(path: Path, what: str, hint: str):
    if not path.exists():
        raise UsageError(f"{what} not found at {path}; run `{hint}` first")


def _load_data(out: Path, split: str):
    d = _paths(out)["data"]
    _require(d / split / "manifest.json", f"{split} dataset", "comlsim gen-data")
    return load_dataset(d, split)


def _load_model(out: Path) -> LatentModel:
    p = _paths(out)["model"]
    _require(p, "trained flux model", "comlsim train-flux")
    return load_model(p)


def _init_for(cfg: RunConfig, grid, source, case: int):
    s = cfg.solve
    if s.init == "zero":
        return ZeroInit()
    if s.init == "uniform":
        return UniformInit(s.init_value)
    if s.init == "random":
        return RandomInit(s.init_distribution, s.init_amplitude, cfg.run.seed + case)
    if cfg.problem.kind != "poisson":
        raise UsageError("solve.init = coarse is only available for the linear Poisson problem")
    return coarse_poisson_init(grid, source, s.coarse_n, noise=s.noise, seed=cfg.run.seed + case)


def _record_config(out: Path, cmd: str, cfg: RunConfig):
    atomic_write_text(out / "configs" / f"{cmd}.ini", cfg.to_ini())


def _clear(directory: Path, pattern: str):
    """Drop per-case files of an earlier run so a rerun leaves exactly its own set."""
    if directory.is_dir():
        for p in directory.glob(pattern):
            p.unlink()


def _manifest(cfg: RunConfig, out: Path, **kw) -> dict:
    m = {"experiment_id": cfg.run.experiment_id, "seed": str(cfg.run.seed), "version": __version__,
         "config": cfg.to_dict()}
    for key in ("ae", "model"):
        p = _paths(out)[key]
        if p.exists():
            m[f"{key}_sha256"] = bundle_hash(p)
    m.update(kw)
    return m


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    p = cfg.problem
    grid = _grid(cfg)
    for split, n in (("train", p.n_train), ("test", p.n_test)):
        ds = generate(p.kind, grid, n, cfg.run.seed, split, p.k_max, _sigma(cfg))
        save_dataset(ds, _paths(out)["data"], split, {"config": cfg.to_dict()})
    print(f"wrote {p.n_train} training and {p.n_test} test samples to {_paths(out)['data']}")
    return EXIT_OK


def cmd_train_ae(cfg: RunConfig, out: Path) -> int:
    train = _load_data(out, "train")
    pc = _pipeline_config(cfg)
    sol_ae, src_ae, sn, cn = train_patch_autoencoders(train, pc)
    save_autoencoders(_paths(out)["ae"], sol_ae, (src_ae,), sn, (cn,), (train.grid.hx, train.grid.hy),
                      {"config": cfg.to_dict()})
    for name, ae in (("solution", sol_ae), ("source", src_ae)):
        r = ae.train_report_
        print(f"{name} autoencoder: validation MAE {r.best_val_mae:.3e} after {r.epochs_used} epochs "
              f"({r.stop_reason})")
    return EXIT_OK


def cmd_train_flux(cfg: RunConfig, out: Path) -> int:
    _require(_paths(out)["ae"], "trained autoencoders", "comlsim train-ae")
    train = _load_data(out, "train")
    sol_ae, conds, sn, cns, spacing = load_autoencoders(_paths(out)["ae"])
    pc = _pipeline_config(cfg)
    X = flux_training_inputs(train, sol_ae, conds[0], sn, cns[0], sol_ae.patch_size, pc.flux_augment)
    flux = train_flux(X, sol_ae, conds[0], pc)
    model = LatentModel(sol_ae, conds, flux, sn, cns, spacing)
    save_model(_paths(out)["model"], model, {"config": cfg.to_dict()})
    r = flux.train_report_
    print(f"flux autoencoder: validation MAE {r.best_val_mae:.3e} after {r.epochs_used} epochs")
    return EXIT_OK


def _cases(cfg: RunConfig, n: int) -> range:
    return range(n if cfg.solve.cases == 0 else min(n, cfg.solve.cases))


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    model = _load_model(out)
    test = _load_data(out, "test")
    scfg = _solve_config(cfg)
    d = out / "solve"
    _clear(d, "case_*")
    rows, timing, all_ok = [], {}, True
    names = test.variables
    for i in _cases(cfg, len(test)):
        state = initialize_state(model, [test.sources[i]], test.grid, _init_for(cfg, test.grid, test.sources[i], i))
        res = solve(state, model, scfg)
        for name, f in zip(names, res.fields):
            write_field(d / f"case_{i:04d}_{name}.cmlf", f)
        write_residual_csv(d / f"case_{i:04d}_residuals.csv", res.report.residual_rows())
        truth = model.normalize_solution(test.solutions[i])
        for v, name in enumerate(names):
            rows.append((cfg.run.experiment_id, i, f"mae_{name}",
                         float(np.mean(np.abs(res.normalized[v] - truth[v])))))
        rows.append((cfg.run.experiment_id, i, "iterations", res.report.iterations))
        rows.append((cfg.run.experiment_id, i, "converged", int(res.report.converged)))
        timing[str(i)] = res.report.wall_time
        all_ok &= res.report.converged
        print(f"case {i}: {'converged' if res.report.converged else 'NOT converged'} in "
              f"{res.report.iterations} iterations")
    write_result_csv(d / "results.csv", rows)
    write_manifest(d / "manifest.json", _manifest(cfg, out))
    atomic_write_text(d / "timing.json", json.dumps(timing, sort_keys=True) + "\n")
    return EXIT_OK if all_ok else EXIT_NONCONVERGED


def _fcnn(cfg: RunConfig, train):
    e = cfg.eval
    return FcnnBaseline(channels=e.fcnn_channels, max_epochs=e.fcnn_epochs,
                        seed=cfg.run.seed % 2 ** 31).fit(train.sources, train.solutions)


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    model = _load_model(out)
    test = _load_data(out, "test")
    test = test.subset(list(_cases(cfg, len(test))))
    scfg = _solve_config(cfg)
    eid, suite = cfg.run.experiment_id, cfg.eval.suite
    rows, extra, timing, ok = [], {}, {}, True
    if suite == "test":
        cases = evaluate_solver(model, test, scfg)
        rows += result_rows(eid, cases)
        fcnn = _fcnn(cfg, _load_data(out, "train"))
        rows += [(eid, i, "baseline_mae", m) for i, m in enumerate(baseline_mae(fcnn, test, model))]
        ok = all(c.converged for c in cases)
    elif suite == "ood":
        fcnn = _fcnn(cfg, _load_data(out, "train"))
        table = ood_gaussian_sweep(model, fcnn, cfg.eval.ood_k, cfg.eval.ood_n, cfg.run.seed, scfg,
                                   cfg.problem.kind, test.grid)
        for r in table:
            for key in ("comlsim_mae", "baseline_mae", "converged"):
                rows.append((eid, f"k={r['k']}", key, r[key]))
    elif suite == "pjgs":
        rep = pj_vs_gs_report(model, test, scfg)
        for m, cases in rep.items():
            rows += result_rows(eid, cases, prefix=f"{m}_")
            timing[m] = [c.wall_time for c in cases]
    elif suite == "coarse":
        if cfg.problem.kind != "poisson":
            raise UsageError("the coarse suite needs the linear Poisson problem")
        rep = coarse_coupling_report(model, test, cfg.eval.noise_levels, cfg.solve.coarse_n, scfg, cfg.run.seed)
        for mode, cases in rep.items():
            rows += result_rows(eid, cases, prefix=f"{mode}_")
    elif suite == "robustness":
        rep = robustness_suite(model, test.sources[0], test.solutions[0], test.grid, cfg.eval.robustness_n,
                               cfg=scfg, seed=cfg.run.seed)
        for i, r in enumerate(rep["runs"]):
            rows += [(eid, i, "converged", int(r["converged"])), (eid, i, "iterations", r["iterations"]),
                     (eid, i, "mae", r["mae"])]
        rows.append((eid, "all", "max_pairwise_mae", float(rep["pairwise_mae"].max())))
        ok = all(r["converged"] for r in rep["runs"])
    elif suite == "extended":
        big = test.grid.scaled(2)
        ds = generate(cfg.problem.kind, big, len(test), cfg.run.seed, "extended", cfg.problem.k_max,
                      _sigma(cfg), spec_grid=test.grid)
        cases = evaluate_solver(model, ds, scfg)
        rows += result_rows(eid, cases)
        ok = all(c.converged for c in cases)
    write_result_csv(out / "eval" / f"{suite}.csv", rows)
    write_manifest(out / "eval" / f"{suite}.manifest.json", _manifest(cfg, out, suite=suite, **extra))
    if timing:
        atomic_write_text(out / "eval" / f"{suite}.timing.json", json.dumps(timing, sort_keys=True) + "\n")
    print(f"wrote {len(rows)} result rows to {out / 'eval' / (suite + '.csv')}")
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    train = _load_data(out, "train")
    test = _load_data(out, "test")
    test = test.subset(list(_cases(cfg, len(test))))
    pc, scfg, eid = _pipeline_config(cfg), _solve_config(cfg), cfg.run.experiment_id
    rows = []
    if cfg.ablate.kind == "bottleneck":
        model = _load_model(out)
        X = flux_training_inputs(train, model.solution_ae, model.condition_aes[0], model.solution_norm,
                                 model.condition_norms[0], model.s, pc.flux_augment)
        table = ablate_flux_bottleneck(model, X, test, cfg.ablate.values, pc, scfg)
        key = "bottleneck"
    else:
        table = ablate_subdomain_size(train, test, cfg.ablate.values, pc, scfg)
        key = "subdomain"
    for r in table:
        for m, v in r.items():
            if m != key:
                rows.append((eid, f"{key}={r[key]}", m, float(v)))
    write_result_csv(out / "ablate" / f"{key}.csv", rows)
    write_manifest(out / "ablate" / f"{key}.manifest.json", _manifest(cfg, out, ablation=key))
    for r in table:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_stability(cfg: RunConfig, out: Path) -> int:
    model = _load_model(out)
    test = _load_data(out, "test")
    scfg = _solve_config(cfg)
    samples, ok = [], True
    for i in _cases(cfg, len(test)):
        res = solve(initialize_state(model, [test.sources[i]], test.grid), model, scfg)
        samples.append(res.state.assemble_all())
        ok &= res.report.converged
    rep = estimate_stability(model.flux_ae, np.concatenate(samples))
    payload = {"estimate": rep.estimate, "power_iteration_converged": rep.converged,
               "samples": int(len(rep.per_sample)), "contractive": rep.estimate < 1.0}
    atomic_write_text(out / "stability" / "stability.json", json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(f"Jacobian norm estimate: {rep.estimate:.6f} ({'below' if rep.estimate < 1 else 'not below'} one)")
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_evolve(cfg: RunConfig, out: Path) -> int:
    model = _load_model(out)
    test = _load_data(out, "test")
    k = cfg.solve.snapshots or 10
    src, truth = test.sources[0], test.solutions[0]
    state = initialize_state(model, [src], test.grid, _init_for(cfg, test.grid, src, 0))
    res = record_evolution(state, model, k, _solve_config(cfg))
    t = model.normalize_solution(truth)
    rows = []
    d = out / "evolve"
    _clear(d, "iter_*")
    for it, snap in zip(res.report.snapshot_iterations, res.report.snapshots):
        for v, name in enumerate(test.variables):
            f = ScalarField(test.grid, model.solution_norm.denormalize(snap[v], var=v))
            write_field(d / f"iter_{it:05d}_{name}.cmlf", f)
            export_field_image(f, d / f"iter_{it:05d}_{name}")
        rows.append((cfg.run.experiment_id, it, "mae", float(np.mean(np.abs(snap - t)))))
    write_result_csv(d / "errors.csv", rows)
    write_residual_csv(d / "residuals.csv", res.report.residual_rows())
    print(f"wrote {len(res.report.snapshots)} snapshots to {d}")
    return EXIT_OK if res.report.converged else EXIT_NONCONVERGED


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-flux": cmd_train_flux,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "stability": cmd_stability,
    "evolve": cmd_evolve,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="comlsim", description="Latent fixed-point PDE solver toolkit.")
    ap.add_argument("--version", action="version", version=f"comlsim {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--out", type=Path, default=Path("comlsim-run"), help="working directory")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--method", choices=("pj", "gs"), help="override solve.method")
        p.add_argument("--tol", type=float, help="override solve.tol")
        p.add_argument("--snapshots", type=int, help="override solve.snapshots")
    return ap


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace("run", seed=args.seed)
    over = {k: getattr(args, k) for k in ("method", "tol", "snapshots") if getattr(args, k) is not None}
    if over:
        cfg = cfg.replace("solve", **over)
    from .config import _validate
    _validate(cfg)
    return cfg


def _thread_limit():
    raw = os.environ.get("COMLSIM_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"COMLSIM_THREADS must be a positive integer, got {raw!r}", "COMLSIM_THREADS") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    try:
        cfg = _resolve(args)
        with _thread_limit():
            out = args.out
            out.mkdir(parents=True, exist_ok=True)
            _record_config(out, args.command, cfg)
            return COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"comlsim: configuration error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, FormatError, FileNotFoundError, ValueError) as e:
        print(f"comlsim: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
