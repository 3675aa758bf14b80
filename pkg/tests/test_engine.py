import warnings

import numpy as np
import pytest

from comlsim.autoencoders import assemble_one
from comlsim.engine import (
    CoarseInit,
    RandomInit,
    SolveConfig,
    StabilityWarning,
    UniformInit,
    ZeroInit,
    coarse_poisson_init,
    estimate_stability,
    gs_sweep,
    initialize_state,
    pj_sweep,
    record_evolution,
    solve,
    solve_extended,
    solve_fields,
)
from comlsim.grid import GridSpec, ScalarField


def _source(grid, seed=1):
    return np.random.default_rng(seed).uniform(size=grid.shape)


def _state(model, grid, init=None):
    return initialize_state(model, [_source(grid)], grid,
                            init or RandomInit("uniform", 1.0, seed=3))


def test_pj_sweep_is_order_independent(tiny_model):
    model, grid = tiny_model
    st = _state(model, grid)
    before = st.sol.copy()
    new = pj_sweep(st, model.flux_ae)
    assert np.array_equal(st.sol, before)
    nb = st.decomposition.neighbors
    for k in np.random.default_rng(0).permutation(st.n_subdomains):
        one = model.flux_ae.apply_center(assemble_one(before, st.cond, nb, k)[None])[0]
        assert np.allclose(new[k], one, atol=1e-12)


def test_gs_sweep_uses_updated_neighbours(tiny_model):
    model, grid = tiny_model
    a, b = _state(model, grid), _state(model, grid)
    gs_sweep(a, model.flux_ae)
    nb = b.decomposition.neighbors
    for k in range(b.n_subdomains):
        b.sol[k] = model.flux_ae.apply_center(assemble_one(b.sol, b.cond, nb, k)[None])[0]
    assert np.allclose(a.sol, b.sol, atol=1e-12)
    c = _state(model, grid)
    assert not np.allclose(pj_sweep(c, model.flux_ae), a.sol)


def test_damping_blends_iterates(tiny_model):
    model, grid = tiny_model
    st = _state(model, grid)
    full = pj_sweep(st, model.flux_ae)
    half = pj_sweep(st, model.flux_ae, damping=0.5)
    assert np.allclose(half, 0.5 * st.sol + 0.5 * full)


@pytest.mark.parametrize("method", ["pj", "gs"])
def test_contraction_converges_to_fixed_point(tiny_model, method):
    model, grid = tiny_model
    res = solve(_state(model, grid), model, SolveConfig(method=method, tol=1e-10, max_iters=500))
    assert res.report.converged and res.report.residuals[-1] < 1e-10
    fixed = pj_sweep(res.state, model.flux_ae)
    assert np.max(np.abs(fixed - res.state.sol)) < 1e-8
    assert res.normalized.shape == (1, 16, 16) and res.fields[0].grid == grid


def test_pj_and_gs_share_fixed_point(tiny_model):
    model, grid = tiny_model
    cfg = dict(tol=1e-11, max_iters=1000)
    a = solve(_state(model, grid), model, SolveConfig(method="pj", **cfg))
    b = solve(_state(model, grid), model, SolveConfig(method="gs", **cfg))
    assert np.max(np.abs(a.state.sol - b.state.sol)) < 1e-8


def test_iteration_cap_reports_non_convergence(tiny_model):
    model, grid = tiny_model
    res = solve(_state(model, grid), model, SolveConfig(tol=1e-30, max_iters=4))
    rep = res.report
    assert not rep.converged and rep.iterations == 4 and len(rep.residuals) == 4
    assert [r[0] for r in rep.residual_rows()] == [1, 2, 3, 4]


def test_residual_is_rms_latent_change(tiny_model):
    model, grid = tiny_model
    st = _state(model, grid)
    new = pj_sweep(st, model.flux_ae)
    expect = np.linalg.norm(new - st.sol) / np.sqrt(st.n_subdomains)
    res = solve(_state(model, grid), model, SolveConfig(max_iters=1))
    assert np.isclose(res.report.residuals[0], expect, rtol=1e-12)


def test_solve_is_deterministic(tiny_model):
    model, grid = tiny_model
    a = solve(_state(model, grid), model, SolveConfig(method="gs", max_iters=50))
    b = solve(_state(model, grid), model, SolveConfig(method="gs", max_iters=50))
    assert a.report.residuals == b.report.residuals
    assert a.normalized.tobytes() == b.normalized.tobytes()


def test_snapshot_schedule(tiny_model):
    model, grid = tiny_model
    res = record_evolution(_state(model, grid), model, 3, SolveConfig(tol=1e-30, max_iters=10))
    assert res.report.snapshot_iterations == [0, 3, 6, 9, 10]
    assert np.array_equal(res.report.snapshots[-1], res.normalized)
    with pytest.raises(ValueError):
        record_evolution(_state(model, grid), model, 0)


def test_condition_latents_frozen(tiny_model):
    model, grid = tiny_model
    st = _state(model, grid)
    cond = st.cond.copy()
    solve(st, model, SolveConfig(method="gs", max_iters=20))
    assert np.array_equal(st.cond, cond)
    with pytest.raises(ValueError):
        st.cond[0, 0] = 1.0


def test_grid_spacing_checked(tiny_model):
    model, _ = tiny_model
    with pytest.raises(ValueError, match="spacing"):
        solve_fields(model, [np.zeros((32, 32))], GridSpec(32, 32))


def test_extended_domain_runs_same_weights(tiny_model):
    model, grid = tiny_model
    big = GridSpec(32, 32, 2.0, 2.0)
    res = solve_extended(model, [_source(big)], big, SolveConfig(tol=1e-10, max_iters=500))
    assert res.report.converged and res.normalized.shape == (1, 32, 32)
    assert res.state.n_subdomains == 16


def test_init_modes(tiny_model):
    model, grid = tiny_model
    assert not ZeroInit().field(grid, model).any()
    assert np.all(UniformInit(0.25).field(grid, model) == 0.25)
    for dist in ("uniform", "normal", "laplace", "logistic", "gumbel", "gamma"):
        f = RandomInit(dist, 0.9, seed=1).field(grid, model)
        assert f.shape == (1, 16, 16) and abs(f.mean()) < 0.2
    u = RandomInit("uniform", 0.5, seed=2).field(grid, model)
    assert np.abs(u).max() <= 0.5
    with pytest.raises(ValueError):
        RandomInit("cauchy")


def test_coarse_init_prolongs_a_coarse_solution(tiny_model):
    model, grid = tiny_model
    init = coarse_poisson_init(grid, _source(grid), coarse_n=8)
    f = init.field(grid, model)
    assert f.shape == (1, 16, 16)
    assert init.fields[0].grid.nx == 8
    noisy = CoarseInit(init.fields, noise=0.1, seed=0).field(grid, model)
    assert 0 < np.abs(noisy - f).max() <= 0.1
    with pytest.raises(ValueError):
        coarse_poisson_init(grid, _source(grid), coarse_n=5)


def _fd_jacobian(flux, x, h=1e-6):
    ds, bw = flux.d_sol_total, flux.d_sol_total + flux.d_cond
    cols = [k * bw + i for k in range(5) for i in range(ds)]
    J = np.empty((ds, len(cols)))
    for j, c in enumerate(cols):
        e = np.zeros_like(x)
        e[c] = h
        J[:, j] = (flux.apply_center(x + e) - flux.apply_center(x - e)) / (2 * h)
    return J


def test_center_jacobian_matches_finite_differences(tiny_model):
    model, grid = tiny_model
    x = _state(model, grid).assemble_all()[2]
    J = model.flux_ae.center_jacobian(x)
    assert J.shape == (4, 20)
    assert np.allclose(J, _fd_jacobian(model.flux_ae, x), atol=1e-6)


def test_standardized_jacobian_is_rescaled_raw_jacobian(tiny_model):
    model, grid = tiny_model
    f = model.flux_ae
    x = _state(model, grid).assemble_all()[2]
    ds, bw = f.d_sol_total, f.d_sol_total + f.d_cond
    cols = np.concatenate([np.arange(k * bw, k * bw + ds) for k in range(5)])
    raw = f.center_jacobian(x)
    assert np.allclose(f.center_jacobian(x, standardized=True),
                       raw * f.scale_[cols][None, :] / f.scale_[:ds, None], atol=1e-12)


class _LinearFlux:
    """Centre output = c * centre solution input, nothing else."""

    def __init__(self, c, ds=3):
        self.c, self.ds = c, ds

    def center_jacobian(self, x, standardized=False):
        J = np.zeros((self.ds, 5 * self.ds))
        J[:, : self.ds] = self.c * np.eye(self.ds)
        return J


@pytest.mark.parametrize("c", [0.5, 1.0])
def test_stability_of_scaled_identity(c):
    rep = estimate_stability(_LinearFlux(c), np.zeros((3, 30)))
    assert rep.estimate == pytest.approx(c, abs=1e-6)


def test_stability_estimate_is_spectral_norm(tiny_model):
    model, grid = tiny_model
    X = _state(model, grid).assemble_all()
    rep = estimate_stability(model.flux_ae, X)
    expect = [np.linalg.norm(model.flux_ae.center_jacobian(x, standardized=True), 2) for x in X]
    assert np.allclose(rep.per_sample, expect, rtol=1e-6)
    assert rep.estimate == pytest.approx(max(expect), rel=1e-6) and rep.converged


def test_unstable_model_warns():
    from conftest import make_tiny_model
    model, grid = make_tiny_model(seed=0, weight_scale=1.5)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        try:
            solve(_state(model, grid), model, SolveConfig(max_iters=3, check_stability=True))
        except FloatingPointError:
            pass
    assert any(issubclass(x.category, StabilityWarning) for x in w)
