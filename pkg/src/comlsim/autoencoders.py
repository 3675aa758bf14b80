"""Patch autoencoders for solutions and conditions, the flux-consistency
autoencoder over neighbourhood latents, and the shared training loop.

Patch autoencoders follow the usual convolutional recipe: 3x3 convolutions
with ReLU, each followed by 2x2 max pooling until the patch is 4x4, a dense
stack down to the latent size, and a mirrored decoder with nearest-neighbour
upsampling and a linear output layer.

A patch autoencoder may additionally route a fixed low-order part of each
patch (its mean, or its least-squares plane) around the network. Those
coefficients occupy the first latent slots exactly and the convolutional
path only encodes the remainder. Patch means dominate the variance of
smooth solution fields by orders of magnitude, and handing them to the
optimiser through a deep nonlinear path makes training badly conditioned.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .grid import MISSING, Decomposition
from .nn import (
    Adam,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2,
    Network,
    NonFiniteGradientError,
    ReLU,
    Reshape,
    Upsample2,
    mse_loss,
)
from .validation import check_array, check_is_fitted, check_positive_int

SKIP_MODES = ("none", "mean", "plane")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


# -- training loop -----------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    min_lr_ratio: float = 0.01
    val_fraction: float = 0.1
    mse_tol: float = 1e-6
    mae_tol: float = 1e-3
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 5

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        lo = self.lr * self.min_lr_ratio
        return lo + 0.5 * (self.lr - lo) * (1 + math.cos(math.pi * epoch / self.max_epochs))


@dataclass
class TrainReport:
    train_mse: list = field(default_factory=list)
    train_mae: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    initial_val_mse: float = float("nan")
    stop_reason: str = ""
    epochs_used: int = 0
    best_epoch: int = -1

    @property
    def best_val_mae(self) -> float:
        return self.val_mae[self.best_epoch] if self.best_epoch >= 0 else float("nan")

    @property
    def best_val_mse(self) -> float:
        return self.val_mse[self.best_epoch] if self.best_epoch >= 0 else float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def split_indices(n: int, val_fraction: float, seed: int):
    """Seeded train/validation split; returns ``(train_idx, val_idx)``."""
    if n < 2:
        raise ValueError("need at least two samples to split off a validation set")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _chain_forward(nets, x, record=True):
    tapes = []
    for net in nets:
        x, tape = net.forward(x, record=record)
        tapes.append(tape)
    return x, tapes


def _chain_predict(nets, x, batch_size=512):
    out = []
    for i in range(0, len(x), batch_size):
        out.append(_chain_forward(nets, x[i:i + batch_size], record=False)[0])
    return np.concatenate(out)


def train_chain(nets: list[Network], inputs, targets, cfg: TrainConfig) -> TrainReport:
    """Fit a chain of networks (output of one feeds the next) to MSE targets.

    The best validation checkpoint is restored before returning. Raises
    :class:`TrainingDivergedError` on runaway validation loss or non-finite
    gradients.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    tr, va = split_indices(len(inputs), cfg.val_fraction, cfg.seed)
    xt, yt, xv, yv = inputs[tr], targets[tr], inputs[va], targets[va]
    rng = np.random.default_rng(cfg.seed + 1)
    opts = [Adam(net, lr=cfg.lr) for net in nets]
    report = TrainReport()

    def evaluate():
        pred = _chain_predict(nets, xv)
        d = pred - yv
        return float(np.mean(d * d)), float(np.mean(np.abs(d)))

    report.initial_val_mse, _ = evaluate()
    best = (math.inf, None)
    above = 0
    for epoch in range(cfg.max_epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(xt))
        sse = sae = 0.0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            xb, yb = xt[idx], yt[idx]
            y, tapes = _chain_forward(nets, xb)
            loss, dy = mse_loss(y, yb)
            sse += loss * len(idx)
            sae += float(np.mean(np.abs(y - yb))) * len(idx)
            grads = []
            for net, tape in zip(reversed(nets), reversed(tapes)):
                g, dy = net.backward(tape, dy)
                grads.append(g)
            try:
                for opt, g in zip(reversed(opts), grads):
                    opt.step(g, lr=lr)
            except NonFiniteGradientError:
                report.stop_reason = "non_finite_gradient"
                report.epochs_used = epoch + 1
                raise TrainingDivergedError(
                    f"non-finite gradient in epoch {epoch}; lower the learning rate", report
                ) from None
        report.train_mse.append(sse / len(xt))
        report.train_mae.append(sae / len(xt))
        vmse, vmae = evaluate()
        report.val_mse.append(vmse)
        report.val_mae.append(vmae)
        report.epochs_used = epoch + 1
        if vmse < best[0]:
            best = (vmse, [net.get_flat() for net in nets])
            report.best_epoch = epoch
        if not np.isfinite(vmse) or vmse > cfg.divergence_factor * report.initial_val_mse:
            above += 1
            if above >= cfg.divergence_patience:
                report.stop_reason = "diverged"
                raise TrainingDivergedError(
                    f"validation loss above {cfg.divergence_factor}x its initial value for "
                    f"{cfg.divergence_patience} epochs", report)
        else:
            above = 0
        if vmse <= cfg.mse_tol or vmae <= cfg.mae_tol:
            report.stop_reason = "tolerance"
            break
    else:
        report.stop_reason = "max_epochs"
    if best[1] is not None:
        for net, flat in zip(nets, best[1]):
            net.set_flat(flat)
    return report


# -- patch autoencoders --------------------------------------------------------


def _skip_basis(s: int, mode: str) -> np.ndarray:
    """Orthonormal rows spanning the low-order part removed before encoding."""
    if mode == "none":
        return np.zeros((0, s * s))
    g = (np.arange(s) - (s - 1) / 2) / (s / 2)
    cols = [np.ones((s, s))]
    if mode == "plane":
        cols += [np.tile(g, (s, 1)), np.tile(g[:, None], (1, s))]
    q, _ = np.linalg.qr(np.stack([c.ravel() for c in cols], axis=1))
    # fix signs so the basis is reproducible across LAPACK builds
    q *= np.sign(q.sum(axis=0) + (np.abs(q.sum(axis=0)) < 1e-12))
    return q.T


def build_patch_networks(s: int, n_channels: int, code_dim: int, base_channels: int = 8,
                         dense_width: int = 64, seed: int = 0) -> tuple[Network, Network]:
    """Encoder and decoder for ``s x s`` patches; ``code_dim`` is the learned part."""
    s = int(s)
    if s < 8 or s & (s - 1):
        raise ValueError(f"patch size must be a power of two >= 8, got {s}")
    n_stages = int(math.log2(s // 4))
    chans = [base_channels * 2 ** i for i in range(n_stages)]
    enc, c = [], n_channels
    for o in chans:
        enc += [Conv2D(c, o), ReLU(), MaxPool2()]
        c = o
    flat = c * 16
    enc += [Flatten()]
    if dense_width:
        enc += [Dense(flat, dense_width), ReLU(), Dense(dense_width, code_dim)]
        dec = [Dense(code_dim, dense_width), ReLU(), Dense(dense_width, flat), ReLU()]
    else:
        enc += [Dense(flat, code_dim)]
        dec = [Dense(code_dim, flat), ReLU()]
    dec += [Reshape((c, 4, 4))]
    outs = chans[::-1][1:] + [n_channels]
    for o in outs:
        dec += [Upsample2(), Conv2D(c, o)]
        if o is not outs[-1] or len(dec) == 0:
            dec += [ReLU()]
        c = o
    if isinstance(dec[-1], ReLU):
        dec.pop()
    encoder = Network(enc, (n_channels, s, s), seed=seed)
    decoder = Network(dec, (code_dim,), seed=seed + 1)
    return encoder, decoder


class PatchAutoencoder(TransformerMixin, BaseEstimator):
    """Convolutional autoencoder over normalised ``(C, s, s)`` patches.

    ``transform`` maps patches to latent vectors of length ``latent_dim``;
    ``inverse_transform`` decodes them. Patches flagged inactive through the
    ``mask`` argument of :meth:`transform` encode to exact zero vectors.
    """

    def __init__(self, patch_size=32, n_channels=1, latent_dim=11, base_channels=8,
                 dense_width=64, skip="mean", max_epochs=60, batch_size=32, lr=2e-3,
                 lr_schedule="cosine", val_fraction=0.1, mse_tol=1e-6, mae_tol=1e-3,
                 seed=0):
        self.patch_size = patch_size
        self.n_channels = n_channels
        self.latent_dim = latent_dim
        self.base_channels = base_channels
        self.dense_width = dense_width
        self.skip = skip
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.val_fraction = val_fraction
        self.mse_tol = mse_tol
        self.mae_tol = mae_tol
        self.seed = seed

    # -- construction --------------------------------------------------------

    @property
    def n_skip(self) -> int:
        return {"none": 0, "mean": 1, "plane": 3}[self.skip] * int(self.n_channels)

    def _validate_params(self):
        check_positive_int(self.patch_size, "patch_size")
        check_positive_int(self.n_channels, "n_channels")
        check_positive_int(self.latent_dim, "latent_dim")
        if self.skip not in SKIP_MODES:
            raise ValueError(f"skip must be one of {SKIP_MODES}, got {self.skip!r}")
        if self.latent_dim <= self.n_skip:
            raise ValueError(
                f"latent_dim {self.latent_dim} leaves no room beside {self.n_skip} skip slots")

    def _build(self):
        self._validate_params()
        self.basis_ = _skip_basis(self.patch_size, self.skip)
        self.encoder_, self.decoder_ = build_patch_networks(
            self.patch_size, self.n_channels, self.latent_dim - self.n_skip,
            self.base_channels, self.dense_width, self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(max_epochs=self.max_epochs, batch_size=self.batch_size, lr=self.lr,
                           lr_schedule=self.lr_schedule, val_fraction=self.val_fraction,
                           mse_tol=self.mse_tol, mae_tol=self.mae_tol, seed=self.seed)

    def _check_patches(self, X):
        X = check_array(X, ndim=(3, 4), name="patches")
        if X.ndim == 3:
            X = X[:, None]
        s, c = self.patch_size, self.n_channels
        if X.shape[1:] != (c, s, s):
            raise ValueError(f"expected patches of shape (n, {c}, {s}, {s}), got {X.shape}")
        return X

    # -- skip path -----------------------------------------------------------

    def _split(self, X):
        """Return (skip coefficients ``(n, n_skip)``, residual patches)."""
        n, c = X.shape[:2]
        flat = X.reshape(n, c, -1)
        coef = flat @ self.basis_.T  # (n, c, k)
        resid = flat - coef @ self.basis_
        return coef.reshape(n, -1), resid.reshape(X.shape)

    def _merge(self, coef, resid):
        n, c = resid.shape[:2]
        low = coef.reshape(n, c, -1) @ self.basis_
        return resid + low.reshape(resid.shape)

    # -- estimator API -------------------------------------------------------

    def fit(self, X, y=None):
        self._build()
        X = self._check_patches(X)
        _, resid = self._split(X)
        self.train_report_ = train_chain([self.encoder_, self.decoder_], resid, resid,
                                         self.train_config())
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X, mask=None):
        check_is_fitted(self, "encoder_")
        X = self._check_patches(X)
        coef, resid = self._split(X)
        code = self.encoder_.predict(resid, batch_size=512)
        z = np.concatenate([coef, code], axis=1)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (len(X),):
                raise ValueError(f"mask must have shape ({len(X)},), got {mask.shape}")
            z[~mask] = 0.0
        return z

    def inverse_transform(self, Z):
        check_is_fitted(self, "encoder_")
        Z = check_array(Z, ndim=2, name="latents")
        if Z.shape[1] != self.latent_dim:
            raise ValueError(f"expected latents of width {self.latent_dim}, got {Z.shape[1]}")
        coef, code = Z[:, :self.n_skip], Z[:, self.n_skip:]
        resid = self.decoder_.predict(code, batch_size=512)
        return self._merge(coef, resid)

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def reconstruction_mae(self, X) -> float:
        X = self._check_patches(X)
        return float(np.mean(np.abs(self.reconstruct(X) - X)))

    def score(self, X, y=None):
        return -self.reconstruction_mae(X)

    # -- persistence helpers -------------------------------------------------

    def state_dict(self) -> dict:
        check_is_fitted(self, "encoder_")
        return {"params": self.get_params(), "encoder": self.encoder_.get_flat(),
                "decoder": self.decoder_.get_flat()}

    @classmethod
    def from_state(cls, params: dict, encoder_flat, decoder_flat) -> "PatchAutoencoder":
        ae = cls(**params)
        ae._build()
        ae.encoder_.set_flat(encoder_flat)
        ae.decoder_.set_flat(decoder_flat)
        ae.n_features_in_ = ae.n_channels * ae.patch_size ** 2
        return ae


# -- flux autoencoder ------------------------------------------------------------


STENCIL = ("self", "left", "right", "top", "bottom")


def flux_input_dim(d_sol: int, n_vars: int, d_cond: int) -> int:
    return len(STENCIL) * (d_sol * n_vars + d_cond)


def flux_layer_dims(D: int, hidden: int, bottleneck: int) -> list[int]:
    return [D, hidden, hidden // 2, hidden // 4, bottleneck,
            hidden // 4, hidden // 2, hidden, D]


def build_flux_network(D: int, hidden: int = 128, bottleneck: int = 35, seed: int = 0) -> Network:
    if bottleneck >= D:
        raise ValueError(f"bottleneck {bottleneck} must be smaller than the input width {D}")
    if hidden // 4 < 1 or bottleneck < 1:
        raise ValueError("hidden width must be at least 4 and bottleneck at least 1")
    dims = flux_layer_dims(D, hidden, bottleneck)
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Dense(a, b))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return Network(layers, (D,), seed=seed)


def assemble_all(sol: np.ndarray, cond: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Flux inputs for every subdomain, ``(n_sub, 5 * (d_s + d_c))``.

    Block order is self, left, right, top, bottom; each block holds the
    solution latents followed by the condition latents. Missing neighbours
    contribute zero blocks.
    """
    block = np.concatenate([sol, cond], axis=1)
    padded = np.concatenate([block, np.zeros((1, block.shape[1]))], axis=0)
    nb = np.where(neighbors == MISSING, len(block), neighbors)
    idx = np.concatenate([np.arange(len(block))[:, None], nb], axis=1)
    return padded[idx].reshape(len(block), -1)


def assemble_one(sol, cond, neighbors, k: int) -> np.ndarray:
    block_w = sol.shape[1] + cond.shape[1]
    out = np.zeros(len(STENCIL) * block_w)
    for slot, q in enumerate([k] + list(neighbors[k])):
        if q == MISSING:
            continue
        out[slot * block_w:slot * block_w + sol.shape[1]] = sol[q]
        out[slot * block_w + sol.shape[1]:(slot + 1) * block_w] = cond[q]
    return out


def split_blocks(vec, d_sol_total: int, d_cond: int):
    """Inverse bookkeeping of the assembly: ``(sol_blocks (5, d_s), cond_blocks (5, d_c))``."""
    v = np.asarray(vec).reshape(len(STENCIL), d_sol_total + d_cond)
    return v[:, :d_sol_total], v[:, d_sol_total:]


class FluxAutoencoder(BaseEstimator):
    """Dense autoencoder over assembled neighbourhood latents.

    Inputs are centred and scaled internally with training-set statistics, so
    ``apply`` works in raw latent units on both ends. ``scaling="feature"``
    gives every feature unit variance; ``"block"`` uses one pooled scale for
    all solution features and one for all condition features, which keeps
    their relative magnitudes. Condition features are further multiplied by
    ``condition_weight``, which down-weights their share of the loss.
    """

    def __init__(self, d_sol=11, n_vars=1, d_cond=11, hidden=128, bottleneck=35,
                 scaling="feature", condition_weight=1.0,
                 max_epochs=300, batch_size=64, lr=1e-3, lr_schedule="cosine",
                 val_fraction=0.1, mse_tol=1e-6, mae_tol=1e-3, seed=0):
        self.d_sol = d_sol
        self.n_vars = n_vars
        self.d_cond = d_cond
        self.hidden = hidden
        self.bottleneck = bottleneck
        self.scaling = scaling
        self.condition_weight = condition_weight
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.val_fraction = val_fraction
        self.mse_tol = mse_tol
        self.mae_tol = mae_tol
        self.seed = seed

    @property
    def input_dim(self) -> int:
        return flux_input_dim(self.d_sol, self.n_vars, self.d_cond)

    @property
    def d_sol_total(self) -> int:
        return self.d_sol * self.n_vars

    def _build(self):
        self.net_ = build_flux_network(self.input_dim, self.hidden, self.bottleneck, self.seed)

    def fit(self, X, y=None):
        X = check_array(X, ndim=2, name="flux inputs")
        if X.shape[1] != self.input_dim:
            raise ValueError(f"expected width {self.input_dim}, got {X.shape[1]}")
        if self.scaling not in ("feature", "block"):
            raise ValueError(f"scaling must be 'feature' or 'block', got {self.scaling!r}")
        if not self.condition_weight > 0:
            raise ValueError("condition_weight must be positive")
        self._build()
        self.mean_ = X.mean(axis=0)
        self.scale_ = self._scales(X - self.mean_)
        Xs = (X - self.mean_) / self.scale_
        cfg = TrainConfig(max_epochs=self.max_epochs, batch_size=self.batch_size, lr=self.lr,
                          lr_schedule=self.lr_schedule, val_fraction=self.val_fraction,
                          mse_tol=self.mse_tol, mae_tol=self.mae_tol, seed=self.seed)
        self.train_report_ = train_chain([self.net_], Xs, Xs, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def _cond_columns(self) -> np.ndarray:
        bw = self.d_sol_total + self.d_cond
        return (np.arange(self.input_dim) % bw) >= self.d_sol_total

    def _scales(self, Xc) -> np.ndarray:
        cond = self._cond_columns()
        if self.scaling == "feature":
            sd = Xc.std(axis=0)
        else:
            sd = np.empty(Xc.shape[1])
            for cols in (~cond, cond):
                sd[cols] = np.sqrt(np.mean(Xc[:, cols] ** 2)) if cols.any() else 1.0
        sd = np.where(sd > 1e-12, sd, 1.0)
        sd[cond] /= self.condition_weight
        return sd

    def apply(self, X):
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"expected width {self.input_dim}, got {X.shape[1]}")
        Y = self.net_.forward((X - self.mean_) / self.scale_, record=False)[0]
        Y = Y * self.scale_ + self.mean_
        return Y[0] if single else Y

    def apply_center(self, X):
        """New centre solution latents for a batch of assembled inputs."""
        return self.apply(X)[..., :self.d_sol_total]

    def center_jacobian(self, x, standardized: bool = False) -> np.ndarray:
        """Exact Jacobian of the centre solution output w.r.t. all five solution blocks.

        Built row by row from reverse-mode products; shape ``(d_s, 5 * d_s)``.
        By default it is in raw latent units. ``standardized=True`` gives it in
        the per-feature standardised coordinates the network itself sees, where
        every latent slot has unit spread and a norm is comparable across slots.
        """
        check_is_fitted(self, "net_")
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        ds, bw = self.d_sol_total, self.d_sol_total + self.d_cond
        _, tape = self.net_.forward((x - self.mean_) / self.scale_)
        rows = []
        for i in range(ds):
            dy = np.zeros((1, self.input_dim))
            dy[0, i] = 1.0 if standardized else self.scale_[i]
            _, dx = self.net_.backward(tape, dy)
            rows.append(dx[0] if standardized else dx[0] / self.scale_)
        J = np.array(rows)
        sol_cols = np.concatenate([np.arange(k * bw, k * bw + ds) for k in range(len(STENCIL))])
        return J[:, sol_cols]

    def state_dict(self) -> dict:
        check_is_fitted(self, "net_")
        return {"params": self.get_params(), "net": self.net_.get_flat(),
                "mean": self.mean_, "scale": self.scale_}

    @classmethod
    def from_state(cls, params, net_flat, mean, scale) -> "FluxAutoencoder":
        fa = cls(**params)
        fa._build()
        fa.net_.set_flat(net_flat)
        fa.mean_ = np.asarray(mean, dtype=np.float64)
        fa.scale_ = np.asarray(scale, dtype=np.float64)
        fa.n_features_in_ = fa.input_dim
        return fa


def neighbors_of(decomposition: Decomposition) -> np.ndarray:
    return decomposition.neighbors
