from __future__ import annotations

import numpy as np

from .network import Network


class NonFiniteGradientError(FloatingPointError):
    pass


def adam_step(params, grads, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params``, ``m`` and ``v``.

    All four containers are flat lists of arrays with matching shapes.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient encountered")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    return params


class Adam:
    """Adam state bound to one network; moments share parameter shapes."""

    def __init__(self, net: Network, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for _, p in net.param_items()]
        self.v = [np.zeros_like(p) for _, p in net.param_items()]

    def step(self, grads, lr=None):
        self.t += 1
        keys = [k for k, _ in self.net.param_items()]
        params = [self.net.layers[i].params[name] for i, name in keys]
        flat_grads = [grads[i][name] for i, name in keys]
        adam_step(params, flat_grads, self.m, self.v, self.t,
                  lr=self.lr if lr is None else lr,
                  beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        self.net.touch()
