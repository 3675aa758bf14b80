"""Sequential networks with exact reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, ReLU, layer_from_config


class StaleCacheError(RuntimeError):
    """Raised when a forward cache is reused after the weights changed."""


@dataclass
class Tape:
    """Activations recorded by :meth:`Network.forward`."""

    caches: list
    version: int
    owner: int
    inputs: list = field(default_factory=list)


class Network:
    """An ordered stack of layers with validated shapes.

    Shapes are checked end to end when the network is built, before any
    parameter is allocated beyond the layer that fails.
    """

    def __init__(self, layers: list[Layer], input_shape, seed: int = 0):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        self._version = 0
        rng = np.random.default_rng(self.seed)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.build(shape, rng)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer!r}): {exc}") from None
        self.output_shape = shape

    # -- parameters ---------------------------------------------------------

    @property
    def params(self) -> list[dict[str, np.ndarray]]:
        return [layer.params for layer in self.layers]

    def n_params(self) -> int:
        return sum(p.size for d in self.params for p in d.values())

    def param_items(self):
        for i, d in enumerate(self.params):
            for name in sorted(d):
                yield (i, name), d[name]

    def get_flat(self) -> np.ndarray:
        arrays = [p.ravel() for _, p in self.param_items()]
        return np.concatenate(arrays) if arrays else np.zeros(0)

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for (i, name), p in self.param_items():
            self.layers[i].params[name] = flat[offset:offset + p.size].reshape(p.shape).copy()
            offset += p.size
        if offset != flat.size:
            raise ValueError(f"expected {offset} parameters, got {flat.size}")
        self.touch()

    def touch(self):
        """Mark parameters as modified so older tapes are rejected."""
        self._version += 1

    def config(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "layers": [layer.config() for layer in self.layers],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Network":
        layers = [layer_from_config(c) for c in cfg["layers"]]
        return cls(layers, cfg["input_shape"], seed=cfg.get("seed", 0))

    def copy(self) -> "Network":
        net = Network.from_config(self.config())
        net.set_flat(self.get_flat())
        return net

    # -- evaluation ---------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ValueError(
                f"input shape {x.shape[1:]} does not match network input {self.input_shape}"
            )
        return x

    def forward(self, x, record: bool = True):
        """Run the stack; returns ``(y, tape)``. ``tape`` is None when not recording."""
        x = self._check_input(x)
        if len(self.input_shape) == 3:
            x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            if record:
                caches.append(cache)
        if len(self.output_shape) == 3:
            x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        if not record:
            return x, None
        return x, Tape(caches, self._version, id(self))

    def predict(self, x, batch_size: int | None = None):
        x = self._check_input(x)
        if batch_size is None or len(x) <= batch_size:
            return self.forward(x, record=False)[0]
        out = [self.forward(x[i:i + batch_size], record=False)[0]
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def backward(self, tape: Tape, dy):
        """Back-propagate ``dy``; returns ``(grads, dx)``.

        ``grads`` mirrors :attr:`params` (one dict per layer).
        """
        if tape is None or tape.owner != id(self) or tape.version != self._version:
            raise StaleCacheError("tape does not belong to the current weights")
        dy = np.asarray(dy, dtype=np.float64)
        if len(self.output_shape) == 3:
            dy = np.ascontiguousarray(dy.transpose(1, 0, 2, 3))
        grads: list[dict] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(dy, tape.caches[i])
            grads[i] = g
        if len(self.input_shape) == 3:
            dy = dy.transpose(1, 0, 2, 3)
        return grads, dy

    def vjp(self, x, dy):
        """Input cotangent ``dy @ J(x)`` for a batch."""
        _, tape = self.forward(x)
        return self.backward(tape, dy)[1]


def mse_loss(y, target):
    """Mean squared error over every element, and its gradient."""
    diff = y - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def flatten_grads(net: Network, grads) -> np.ndarray:
    arrays = [grads[i][name].ravel() for (i, name), _ in net.param_items()]
    return np.concatenate(arrays) if arrays else np.zeros(0)


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    worst_index: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _nudge_off_kinks(net: Network, x, margin=1e-6):
    """Shift inputs so no ReLU pre-activation sits within ``margin`` of zero."""
    x = np.array(x, dtype=np.float64)
    for _ in range(20):
        h, kinked = x, False
        if len(net.input_shape) == 3:
            h = x.transpose(1, 0, 2, 3)
        for layer in net.layers:
            if isinstance(layer, ReLU) and np.any(np.abs(h) < margin):
                kinked = True
                break
            h, _ = layer.forward(h)
        if not kinked:
            break
        x = x + margin * 10
    return x


def gradient_check(net: Network, x, target=None, step=1e-5, max_params=100_000,
                   floor=1e-8) -> GradCheckReport:
    """Compare backprop parameter gradients of the MSE loss with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if net.n_params() > max_params:
        raise ValueError(f"gradient check capped at {max_params} parameters")
    x = _nudge_off_kinks(net, x)
    if target is None:
        target = np.zeros((len(x),) + net.output_shape)

    def loss_at(flat):
        net.set_flat(flat)
        return mse_loss(net.forward(x, record=False)[0], target)[0]

    theta = net.get_flat()
    net.set_flat(theta)
    y, tape = net.forward(x)
    _, dy = mse_loss(y, target)
    analytic = flatten_grads(net, net.backward(tape, dy)[0])

    numeric = np.empty_like(theta)
    for j in range(theta.size):
        e = theta.copy()
        e[j] += step
        lp = loss_at(e)
        e[j] -= 2 * step
        lm = loss_at(e)
        numeric[j] = (lp - lm) / (2 * step)
    net.set_flat(theta)

    abs_err = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = abs_err / scale
    worst = int(np.argmax(rel)) if rel.size else -1
    return GradCheckReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        max_abs_error=float(abs_err.max()) if abs_err.size else 0.0,
        n_checked=int(theta.size),
        worst_index=worst,
    )
