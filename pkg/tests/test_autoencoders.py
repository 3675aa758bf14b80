import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from comlsim.autoencoders import (
    FluxAutoencoder,
    PatchAutoencoder,
    TrainConfig,
    TrainingDivergedError,
    _skip_basis,
    assemble_all,
    assemble_one,
    build_flux_network,
    build_patch_networks,
    flux_input_dim,
    flux_layer_dims,
    split_blocks,
    split_indices,
    train_chain,
)
from comlsim.grid import Decomposition, GridSpec
from comlsim.nn import Dense, Network


def smooth_patches(n, s=8, seed=0):
    """Random low-order polynomials plus a small bump: easy to compress."""
    rng = np.random.default_rng(seed)
    g = np.linspace(-1, 1, s)
    X, Y = np.meshgrid(g, g)
    c = rng.standard_normal((n, 5, 1, 1))
    p = c[:, 0] + c[:, 1] * X + c[:, 2] * Y + 0.3 * c[:, 3] * X * Y + 0.2 * c[:, 4] * (X ** 2 - Y ** 2)
    return p[:, None]


@pytest.mark.parametrize("mode, k", [("none", 0), ("mean", 1), ("plane", 3)])
def test_skip_basis_orthonormal(mode, k):
    B = _skip_basis(8, mode)
    assert B.shape == (k, 64)
    assert np.allclose(B @ B.T, np.eye(k), atol=1e-12)


def test_plane_skip_captures_planes_exactly():
    ae = PatchAutoencoder(patch_size=8, latent_dim=5, skip="plane", max_epochs=1)
    ae._build()
    g = np.linspace(0, 1, 8)
    plane = (2.0 + 3 * g[None, :] - g[:, None])[None, None]
    coef, resid = ae._split(plane)
    assert np.max(np.abs(resid)) < 1e-12
    assert np.allclose(ae._merge(coef, resid), plane)


def test_patch_network_shapes():
    enc, dec = build_patch_networks(32, 2, 7)
    assert enc.output_shape == (7,) and dec.output_shape == (2, 32, 32)
    with pytest.raises(ValueError):
        build_patch_networks(12, 1, 4)


def test_patch_autoencoder_learns_and_scores():
    X = smooth_patches(400)
    ae = PatchAutoencoder(patch_size=8, latent_dim=6, skip="mean", base_channels=4,
                          dense_width=16, max_epochs=40, lr=3e-3, seed=1).fit(X)
    rep = ae.train_report_
    assert rep.best_val_mse < 0.2 * rep.initial_val_mse
    Z = ae.transform(X)
    assert Z.shape == (400, 6)
    assert np.allclose(Z[:, 0], X.reshape(400, -1).mean(axis=1) * 8)  # mean slot = sum / s
    assert ae.score(X) == -ae.reconstruction_mae(X)
    assert ae.reconstruction_mae(X) < np.mean(np.abs(X - X.mean(axis=(2, 3), keepdims=True)))


def test_patch_autoencoder_mask_and_validation():
    X = smooth_patches(20)
    ae = PatchAutoencoder(patch_size=8, latent_dim=4, base_channels=2, dense_width=8, max_epochs=1).fit(X)
    mask = np.arange(20) % 2 == 0
    Z = ae.transform(X, mask=mask)
    assert not Z[~mask].any() and Z[mask].any()
    with pytest.raises(ValueError):
        ae.transform(np.zeros((3, 1, 16, 16)))
    with pytest.raises(ValueError):
        ae.inverse_transform(np.zeros((3, 5)))
    with pytest.raises(ValueError):
        PatchAutoencoder(patch_size=8, latent_dim=3, skip="plane").fit(X)


def test_patch_autoencoder_sklearn_contract():
    ae = PatchAutoencoder(patch_size=8, latent_dim=4)
    with pytest.raises(NotFittedError):
        ae.transform(smooth_patches(2))
    c = clone(ae)
    assert c.get_params() == ae.get_params()


def test_patch_autoencoder_state_round_trip():
    X = smooth_patches(30)
    ae = PatchAutoencoder(patch_size=8, latent_dim=4, base_channels=2, dense_width=8, max_epochs=2).fit(X)
    st = ae.state_dict()
    ae2 = PatchAutoencoder.from_state(st["params"], st["encoder"], st["decoder"])
    assert np.array_equal(ae.transform(X), ae2.transform(X))
    assert np.array_equal(ae.reconstruct(X), ae2.reconstruct(X))


def test_training_is_seeded():
    X = smooth_patches(40)
    kw = dict(patch_size=8, latent_dim=4, base_channels=2, dense_width=8, max_epochs=3, seed=5)
    a, b = PatchAutoencoder(**kw).fit(X), PatchAutoencoder(**kw).fit(X)
    assert np.array_equal(a.encoder_.get_flat(), b.encoder_.get_flat())


def test_split_indices_disjoint():
    tr, va = split_indices(50, 0.1, 3)
    assert len(va) == 5 and not set(tr) & set(va) and len(tr) + len(va) == 50
    with pytest.raises(ValueError):
        split_indices(1, 0.1, 0)


def test_train_chain_tolerance_stop_and_divergence():
    X = np.random.default_rng(0).standard_normal((64, 3))
    net = Network([Dense(3, 3)], (3,), seed=0)
    rep = train_chain([net], X, X, TrainConfig(max_epochs=500, lr=0.05, mae_tol=1e-3))
    assert rep.stop_reason == "tolerance" and rep.best_val_mae <= 1e-3
    net = Network([Dense(3, 3)], (3,), seed=0)
    with pytest.raises(TrainingDivergedError) as e:
        train_chain([net], X, 1e6 * X, TrainConfig(max_epochs=50, lr=1e3, lr_schedule="constant",
                                                   divergence_factor=1e-3, divergence_patience=2))
    assert e.value.report.stop_reason in ("diverged", "non_finite_gradient")


def test_cosine_schedule():
    cfg = TrainConfig(max_epochs=10, lr=1.0, min_lr_ratio=0.1)
    assert cfg.lr_at(0) == 1.0 and cfg.lr_at(10) == pytest.approx(0.1)
    assert cfg.lr_at(5) == pytest.approx(0.55)


def test_flux_dims():
    assert flux_input_dim(11, 1, 11) == 110
    assert flux_layer_dims(110, 128, 35) == [110, 128, 64, 32, 35, 32, 64, 128, 110]
    with pytest.raises(ValueError):
        build_flux_network(20, 16, 20)


def test_assembly_matches_single_and_pads_missing():
    d = Decomposition(GridSpec(24, 16), 8)
    rng = np.random.default_rng(0)
    sol, cond = rng.standard_normal((6, 2)), rng.standard_normal((6, 3))
    A = assemble_all(sol, cond, d.neighbors)
    for k in range(6):
        assert np.array_equal(A[k], assemble_one(sol, cond, d.neighbors, k))
    sb, cb = split_blocks(A[0], 2, 3)
    assert np.array_equal(sb[0], sol[0]) and np.array_equal(cb[0], cond[0])
    # subdomain 0 sits in the bottom-left corner: left and bottom are padded
    assert not sb[1].any() and not sb[4].any()
    assert np.array_equal(sb[2], sol[1]) and np.array_equal(sb[3], sol[3])


@pytest.mark.parametrize("scaling", ["feature", "block"])
def test_flux_autoencoder_scaling_and_round_trip(scaling):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((300, 35)) * np.linspace(0.1, 5, 35) + 2
    fa = FluxAutoencoder(d_sol=4, d_cond=3, hidden=16, bottleneck=10, scaling=scaling,
                         condition_weight=2.0, max_epochs=3).fit(X)
    cond = fa._cond_columns()
    assert cond.sum() == 15
    if scaling == "block":
        assert len(np.unique(np.round(fa.scale_[~cond], 12))) == 1
    st = fa.state_dict()
    fb = FluxAutoencoder.from_state(st["params"], st["net"], st["mean"], st["scale"])
    assert np.array_equal(fa.apply(X), fb.apply(X))
    assert fa.apply_center(X).shape == (300, 4)
    assert np.array_equal(fa.apply(X[0]), fa.apply(X[:1])[0])


def test_flux_autoencoder_rejects_bad_input():
    with pytest.raises(ValueError):
        FluxAutoencoder(d_sol=4, d_cond=3, hidden=16, bottleneck=5).fit(np.zeros((10, 30)))
    with pytest.raises(ValueError):
        FluxAutoencoder(d_sol=4, d_cond=3, hidden=16, bottleneck=5, scaling="x").fit(np.zeros((10, 35)))


def test_identical_patches_train_to_near_zero_loss():
    # default-width network; the 2-channel test nets cannot represent an arbitrary 8x8 pattern
    X = np.tile(smooth_patches(1, s=16, seed=4), (256, 1, 1, 1))
    ae = PatchAutoencoder(patch_size=16, latent_dim=6, skip="none", max_epochs=50, seed=0).fit(X)
    rep = ae.train_report_
    assert rep.epochs_used <= 50 and rep.best_val_mse < 1e-2 * rep.initial_val_mse


def test_same_seed_same_report():
    X = smooth_patches(40)
    kw = dict(patch_size=8, latent_dim=4, base_channels=2, dense_width=8, max_epochs=3, seed=2)
    assert PatchAutoencoder(**kw).fit(X).train_report_ == PatchAutoencoder(**kw).fit(X).train_report_


def test_all_masked_encodes_to_zero():
    X = smooth_patches(5)
    ae = PatchAutoencoder(patch_size=8, latent_dim=4, base_channels=2, dense_width=8, max_epochs=1).fit(X)
    assert not ae.transform(X, mask=np.zeros(5, bool)).any()


def test_toy_flux_autoencoder_reproduces_line_inputs():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (2000, 1)) @ rng.standard_normal((1, 35))
    fa = FluxAutoencoder(d_sol=4, d_cond=3, hidden=32, bottleneck=6, max_epochs=300, lr=3e-3,
                         seed=0).fit(X)
    assert np.mean(np.abs(fa.apply(X) - X)) <= 1e-3
