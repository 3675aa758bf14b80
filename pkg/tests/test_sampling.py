import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from comlsim.grid import DimensionError, GridSpec
from comlsim.sampling import (
    BcEncoding,
    GmmSpec,
    draw_gmm_params,
    gmm_evaluate,
    sample_darcy_alpha,
    sample_gmm_fixed_k,
    sample_gmm_source,
    sample_laplace_bc,
    sample_tiled_source,
)

G = GridSpec(64, 64)


def test_same_seed_same_field():
    a = sample_gmm_source(G, GmmSpec(seed=11))
    b = sample_gmm_source(G, GmmSpec(seed=11))
    c = sample_gmm_source(G, GmmSpec(seed=12))
    assert np.array_equal(a.values, b.values) and not np.array_equal(a.values, c.values)


def test_single_gaussian_peak_location():
    p = draw_gmm_params(GmmSpec(k_max=1, seed=3), G, k=1)
    f = sample_gmm_fixed_k(G, GmmSpec(k_max=1, seed=3), 1).values
    j, i = np.unravel_index(np.argmax(f), f.shape)
    x, y = G.cell_centers()
    assert abs(x[j, i] - p.mu_x[0]) <= G.hx and abs(y[j, i] - p.mu_y[0]) <= G.hy


def test_field_matches_pointwise_evaluation():
    spec = GmmSpec(seed=5)
    p = draw_gmm_params(spec, G)
    x, y = G.cell_centers()
    assert np.allclose(sample_gmm_source(G, spec).values, gmm_evaluate(p, x, y), atol=1e-12)


def test_active_count_and_sigma_range():
    for seed in range(20):
        spec = GmmSpec(k_max=30, seed=seed)
        p = draw_gmm_params(spec, G)
        assert 1 <= p.n_active <= 30
        assert np.all((p.sigma_x >= 0.004) & (p.sigma_x <= 0.04))


def test_fixed_k_has_k_active():
    p = draw_gmm_params(GmmSpec(seed=1), G, k=60)
    assert p.n_active == 60
    with pytest.raises(ValueError):
        sample_gmm_fixed_k(G, GmmSpec(), 0)


def test_resolution_scaled_widths():
    assert GmmSpec.for_resolution(256).sigma_range == pytest.approx((0.004, 0.04))
    assert GmmSpec.for_resolution(128, nonlinear=True).sigma_range == pytest.approx((0.04, 0.4))


def test_tiled_source_integral_and_divisibility():
    f = sample_tiled_source(G, tiles=8, total=2.5, seed=0)
    assert np.isclose(f.values.sum() * G.hx * G.hy, 2.5)
    with pytest.raises(DimensionError):
        sample_tiled_source(G, tiles=7)


def test_bc_encoding_rules():
    with pytest.raises(ValueError):
        BcEncoding(np.array([1, 1, 1, 1, 0, 0, 0, 0.0]))
    with pytest.raises(ValueError):
        BcEncoding(np.array([2, 0, 0, 0, 0, 0, 0, 0.0]))
    e = sample_laplace_bc(7)
    assert e == sample_laplace_bc(7)
    assert np.all(np.abs(e.magnitudes) <= 1)


def test_darcy_alpha_two_levels_balanced():
    a = sample_darcy_alpha(G, seed=2).values
    assert set(np.unique(a)) == {3.0, 12.0}
    assert abs(np.mean(a == 12.0) - 0.5) < 0.05


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 64 - 1))
def test_property_gmm_nonnegative_and_bounded(seed):
    spec = GmmSpec(seed=seed)
    f = sample_gmm_source(G, spec).values
    p = draw_gmm_params(spec, G)
    assert f.min() >= 0 and f.max() <= p.n_active + 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 32))
def test_property_bc_has_dirichlet(seed):
    assert sample_laplace_bc(seed).boundary().has_dirichlet
