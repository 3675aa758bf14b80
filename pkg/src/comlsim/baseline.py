"""Fully convolutional source-to-solution regressor used as a direct-surrogate baseline.

The network is tied to the grid shape it was trained on. Other shapes are
rejected instead of being silently resampled, which is the practical
limitation the latent solver avoids.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .autoencoders import TrainConfig, train_chain
from .grid import DimensionError, Normalizer
from .nn import Conv2D, MaxPool2, Network, ReLU, Upsample2
from .validation import check_array, check_is_fitted


def build_fcnn(shape, n_out: int = 1, channels: int = 16, depth: int = 3, seed: int = 0) -> Network:
    ny, nx = shape
    if ny % 2 ** depth or nx % 2 ** depth:
        raise DimensionError(f"grid {nx}x{ny} is not divisible by {2 ** depth}")
    layers, c = [], 1
    widths = [channels * min(2 ** i, 2) for i in range(depth)]
    for w in widths:
        layers += [Conv2D(c, w), ReLU(), MaxPool2()]
        c = w
    layers += [Conv2D(c, c), ReLU()]
    for w in widths[::-1]:
        layers += [Upsample2(), Conv2D(c, w), ReLU()]
        c = w
    layers += [Conv2D(c, n_out)]
    return Network(layers, (1, ny, nx), seed=seed)


class FcnnBaseline(RegressorMixin, BaseEstimator):
    """Maps a source field ``(ny, nx)`` to solution fields ``(n_vars, ny, nx)``."""

    def __init__(self, channels=16, depth=3, max_epochs=40, batch_size=8, lr=2e-3, seed=0):
        self.channels = channels
        self.depth = depth
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, sources, solutions):
        X = check_array(sources, ndim=3, name="sources")
        Y = check_array(solutions, ndim=(3, 4), name="solutions")
        if Y.ndim == 3:
            Y = Y[:, None]
        if Y.shape[0] != X.shape[0] or Y.shape[2:] != X.shape[1:]:
            raise DimensionError("sources and solutions do not line up")
        self.shape_ = X.shape[1:]
        self.n_vars_ = Y.shape[1]
        self.source_norm_ = Normalizer.fit(X)
        self.solution_norm_ = Normalizer.fit(Y, n_vars=self.n_vars_)
        self.net_ = build_fcnn(self.shape_, self.n_vars_, self.channels, self.depth, self.seed)
        cfg = TrainConfig(max_epochs=self.max_epochs, batch_size=self.batch_size, lr=self.lr,
                          seed=self.seed, mse_tol=0.0, mae_tol=0.0)
        xn = self.source_norm_.normalize(X)[:, None]
        yn = self.solution_norm_.normalize(Y, var=None)
        self.train_report_ = train_chain([self.net_], xn, yn, cfg)
        return self

    def _check_shape(self, X):
        if X.shape[1:] != tuple(self.shape_):
            raise DimensionError(
                f"baseline was trained on a {self.shape_[1]}x{self.shape_[0]} grid and cannot "
                f"evaluate {X.shape[2]}x{X.shape[1]} inputs without retraining")

    def predict_normalized(self, sources) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_array(sources, ndim=3, name="sources")
        self._check_shape(X)
        return self.net_.predict(self.source_norm_.normalize(X)[:, None], batch_size=8)

    def predict(self, sources) -> np.ndarray:
        return self.solution_norm_.denormalize(self.predict_normalized(sources), var=None)

    def score(self, sources, solutions):
        Y = np.asarray(solutions, dtype=np.float64)
        if Y.ndim == 3:
            Y = Y[:, None]
        yn = self.solution_norm_.normalize(Y, var=None)
        return -float(np.mean(np.abs(self.predict_normalized(sources) - yn)))
