"""Layer kinds for the small reverse-mode network kernel.

Every layer is a plain object with ``build`` (shape inference and parameter
allocation), ``forward`` (returns output plus whatever the backward pass
needs) and ``backward``. Shapes given to ``build`` are per-sample:
``(channel, height, width)`` for images and ``(features,)`` for vectors.

Batched image arrays travel between layers channel-major, ``(C, N, H, W)``,
so each im2col copy moves whole image rows and a convolution is a single
large matmul. :class:`~comlsim.nn.network.Network` converts from and to the
public ``(N, C, H, W)`` layout at its boundaries.
"""

from __future__ import annotations

import numpy as np


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.in_shape: tuple[int, ...] | None = None
        self.out_shape: tuple[int, ...] | None = None

    def build(self, in_shape, rng):
        self.in_shape = tuple(in_shape)
        self.out_shape = self._infer(self.in_shape)
        self._init_params(rng)
        return self.out_shape

    def _infer(self, in_shape):
        return in_shape

    def _init_params(self, rng):
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy, cache):
        """Return ``(dx, grads)`` with ``grads`` keyed like ``params``."""
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items() if k != "kind")
        return f"{type(self).__name__}({args})"


def _he_uniform(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out):
        super().__init__()
        self.n_in = int(n_in)
        self.n_out = int(n_out)

    def _infer(self, in_shape):
        if in_shape != (self.n_in,):
            raise ValueError(f"Dense expects input ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def _init_params(self, rng):
        self.params = {
            "W": _he_uniform(rng, self.n_in, (self.n_in, self.n_out)),
            "b": np.zeros(self.n_out),
        }

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, cache):
        x = cache
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T, grads

    def config(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}


def _im2col(xp, k, h, w):
    """Stack the k*k shifted views of a padded ``(C, N, H+2p, W+2p)`` array.

    Row blocks are ordered (ki, kj) with channels innermost.
    """
    c, n = xp.shape[:2]
    cols = np.empty((k * k, c, n, h, w))
    for i in range(k):
        for j in range(k):
            cols[i * k + j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(k * k * c, n * h * w)


def _shift_add(z, k, shape, flip):
    """Sum the k*k blocks of ``z`` back onto an image (the adjoint of ``_im2col``).

    With ``flip`` each block lands at the mirrored offset, which turns the
    adjoint into a forward correlation.
    """
    c, n, h, w = shape
    p = k // 2
    z = z.reshape(k * k, c, n, h, w)
    out = np.zeros((c, n, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            a, b = (2 * p - i, 2 * p - j) if flip else (i, j)
            out[:, :, a:a + h, b:b + w] += z[i * k + j]
    return out[:, :, p:p + h, p:p + w]


class Conv2D(Layer):
    """Odd-kernel 'same' convolution with stride 1.

    Widening layers (out >= in channels) go through a classic im2col matmul.
    Narrowing layers multiply first and shift-add afterwards, so the large
    intermediate has ``k*k*out`` rows instead of ``k*k*in``.
    """

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, k=3):
        super().__init__()
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.k = int(k)

    def _infer(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ValueError(f"Conv2D expects ({self.in_ch}, H, W), got {in_shape}")
        return (self.out_ch, in_shape[1], in_shape[2])

    def _init_params(self, rng):
        fan_in = self.in_ch * self.k * self.k
        self.params = {
            # columns ordered (ki, kj, channel) to match the im2col row layout
            "W": _he_uniform(rng, fan_in, (self.out_ch, fan_in)),
            "b": np.zeros(self.out_ch),
        }

    @property
    def narrowing(self):
        return self.out_ch < self.in_ch

    def _stacked(self):
        # (k*k*out, in) view of W: rows (ki, kj, o)
        k, c, o = self.k, self.in_ch, self.out_ch
        return self.params["W"].reshape(o, k * k, c).transpose(1, 0, 2).reshape(k * k * o, c)

    def forward(self, x):
        c, n, h, w = x.shape
        k, p, o = self.k, self.k // 2, self.out_ch
        if self.narrowing:
            z = self._stacked() @ x.reshape(c, -1)
            y = _shift_add(z, k, (o, n, h, w), flip=True)
            y += self.params["b"][:, None, None, None]
            return y, x
        cols = _im2col(np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))), k, h, w)
        y = self.params["W"] @ cols
        y += self.params["b"][:, None]
        return y.reshape(o, n, h, w), cols

    def backward(self, dy, cache):
        o, n, h, w = dy.shape
        k, p, c = self.k, self.k // 2, self.in_ch
        dyf = dy.reshape(o, -1)
        if self.narrowing:
            x = cache.reshape(c, -1)
            # blocks of dy shifted the opposite way: row (i', j', o) holds offset k-1-i
            dcols = _im2col(np.pad(dy, ((0, 0), (0, 0), (p, p), (p, p))), k, h, w)
            gw = (dcols @ x.T).reshape(k, k, o, c)[::-1, ::-1].transpose(2, 0, 1, 3)
            grads = {"W": gw.reshape(o, k * k * c), "b": dyf.sum(axis=1)}
            wt = self.params["W"].reshape(o, k, k, c)[:, ::-1, ::-1, :]
            dx = wt.transpose(3, 1, 2, 0).reshape(c, k * k * o) @ dcols
            return dx.reshape(c, n, h, w), grads
        cols = cache
        grads = {"W": dyf @ cols.T, "b": dyf.sum(axis=1)}
        dcols = self.params["W"].T @ dyf
        return _shift_add(dcols, k, (c, n, h, w), flip=False), grads

    def config(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k}


class MaxPool2(Layer):
    kind = "maxpool2"

    def _infer(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ValueError(f"MaxPool2 needs even spatial dims, got {in_shape}")
        return (c, h // 2, w // 2)

    def forward(self, x):
        c, n, h, w = x.shape
        xr = x.reshape(c, n, h // 2, 2, w // 2, 2)
        q = [xr[:, :, :, a, :, b] for a in (0, 1) for b in (0, 1)]
        y = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
        # index of the first maximal element; ties route the gradient to one input
        idx = np.full(y.shape, 3, dtype=np.uint8)
        for m in (2, 1, 0):
            idx[q[m] == y] = m
        return y, idx

    def backward(self, dy, cache):
        idx = cache
        c, n, h2, w2 = idx.shape
        dx = np.zeros((c, n, h2, 2, w2, 2))
        for m in range(4):
            dx[:, :, :, m // 2, :, m % 2] = np.where(idx == m, dy, 0.0)
        return dx.reshape(c, n, 2 * h2, 2 * w2), {}


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling."""

    kind = "upsample2"

    def _infer(self, in_shape):
        c, h, w = in_shape
        return (c, 2 * h, 2 * w)

    def forward(self, x):
        c, n, h, w = x.shape
        y = np.broadcast_to(x[:, :, :, None, :, None], (c, n, h, 2, w, 2))
        return y.reshape(c, n, 2 * h, 2 * w), None

    def backward(self, dy, cache):
        c, n, h, w = dy.shape
        return dy.reshape(c, n, h // 2, 2, w // 2, 2).sum(axis=(3, 5)), {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        y = np.maximum(x, 0.0)
        return y, y

    def backward(self, dy, cache):
        return np.where(cache > 0, dy, 0.0), {}


class Flatten(Layer):
    """Image ``(C, H, W)`` to vector; feature order is channel, row, column."""

    kind = "flatten"

    def _infer(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"Flatten expects an image shape, got {in_shape}")
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        c, n, h, w = x.shape
        return x.transpose(1, 0, 2, 3).reshape(n, c * h * w), x.shape

    def backward(self, dy, cache):
        c, n, h, w = cache
        return dy.reshape(n, c, h, w).transpose(1, 0, 2, 3), {}


class Reshape(Layer):
    """Vector to image ``(C, H, W)``; inverse of :class:`Flatten`."""

    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def _infer(self, in_shape):
        if len(in_shape) != 1 or len(self.shape) != 3:
            raise ValueError("Reshape maps a vector onto a (C, H, W) image")
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {in_shape} into {self.shape}")
        return self.shape

    def forward(self, x):
        n = x.shape[0]
        return x.reshape((n,) + self.shape).transpose(1, 0, 2, 3), n

    def backward(self, dy, cache):
        return dy.transpose(1, 0, 2, 3).reshape(cache, -1), {}

    def config(self):
        return {"kind": self.kind, "shape": list(self.shape)}


LAYER_KINDS = {
    cls.kind: cls for cls in (Dense, Conv2D, MaxPool2, Upsample2, ReLU, Flatten, Reshape)
}


def layer_from_config(cfg: dict) -> Layer:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**cfg)
