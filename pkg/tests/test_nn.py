import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate2d

from comlsim.nn import (
    Adam,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2,
    Network,
    NonFiniteGradientError,
    ReLU,
    Reshape,
    StaleCacheError,
    Upsample2,
    adam_step,
    gradient_check,
    mse_loss,
)


def conv_oracle(x, W, b, k):
    """Zero-padded cross-correlation per (sample, out channel) with scipy."""
    n, c = x.shape[:2]
    o = W.shape[0]
    Wk = W.reshape(o, k, k, c)
    y = np.zeros((n, o) + x.shape[2:])
    for s in range(n):
        for oc in range(o):
            y[s, oc] = b[oc] + sum(correlate2d(x[s, ic], Wk[oc, :, :, ic], mode="same")
                                   for ic in range(c))
    return y


@pytest.mark.parametrize("cin,cout,k", [(1, 3, 3), (4, 2, 3), (2, 2, 5)])
def test_conv_matches_scipy(cin, cout, k):
    rng = np.random.default_rng(0)
    net = Network([Conv2D(cin, cout, k)], (cin, 6, 7), seed=1)
    net.layers[0].params["b"] = rng.standard_normal(cout)
    x = rng.standard_normal((3, cin, 6, 7))
    p = net.layers[0].params
    assert np.allclose(net.forward(x, record=False)[0], conv_oracle(x, p["W"], p["b"], k), atol=1e-12)


def test_dense_hand_case():
    net = Network([Dense(2, 1)], (2,))
    net.layers[0].params.update(W=np.array([[2.0], [-1.0]]), b=np.array([0.5]))
    y, tape = net.forward(np.array([[1.0, 3.0]]))
    assert y.tolist() == [[-0.5]]
    grads, dx = net.backward(tape, np.ones((1, 1)))
    assert grads[0]["W"].ravel().tolist() == [1.0, 3.0]
    assert dx.tolist() == [[2.0, -1.0]]


def test_pool_and_upsample_hand_case():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    pool = Network([MaxPool2()], (1, 4, 4))
    y, tape = pool.forward(x)
    assert y[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]
    _, dx = pool.backward(tape, np.ones_like(y))
    assert dx[0, 0].sum() == 4 and dx[0, 0, 1, 1] == 1 and dx[0, 0, 0, 0] == 0
    up = Network([Upsample2()], (1, 2, 2))
    z, tape = up.forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert z[0, 0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    _, dz = up.backward(tape, np.ones_like(z))
    assert dz.ravel().tolist() == [4.0] * 4


def test_relu_and_mse():
    net = Network([ReLU()], (3,))
    assert net.forward(np.array([[-1.0, 0.0, 2.0]]), record=False)[0].tolist() == [[0, 0, 2]]
    loss, g = mse_loss(np.array([1.0, 3.0]), np.array([0.0, 0.0]))
    assert loss == 5.0 and g.tolist() == [1.0, 3.0]


def _random_net(seed):
    rng = np.random.default_rng(seed)
    c1, c2 = rng.integers(1, 4, 2)
    return Network([
        Conv2D(1, int(c1)), ReLU(), MaxPool2(), Conv2D(int(c1), int(c2)), ReLU(), Flatten(),
        Dense(int(c2) * 16, 6), ReLU(), Dense(6, int(c2) * 16), Reshape((int(c2), 4, 4)),
        Upsample2(), Conv2D(int(c2), 1),
    ], (1, 8, 8), seed=seed)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_random_stacks(seed):
    net = _random_net(seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((2, 1, 8, 8))
    rep = gradient_check(net, x, target=rng.standard_normal((2, 1, 8, 8)))
    assert rep.passed(1e-4), rep


def test_input_gradient_matches_finite_differences():
    net = _random_net(9)
    x = np.random.default_rng(1).standard_normal((1, 1, 8, 8))
    dy = np.random.default_rng(2).standard_normal((1, 1, 8, 8))
    dx = net.vjp(x, dy)
    v = np.random.default_rng(3).standard_normal(x.shape)
    h = 1e-6
    fd = (np.sum(dy * net.predict(x + h * v)) - np.sum(dy * net.predict(x - h * v))) / (2 * h)
    assert abs(fd - np.sum(dx * v)) < 1e-6 * max(1.0, abs(fd))


def test_shape_mismatch_rejected_at_build():
    with pytest.raises(ValueError, match="layer 2"):
        Network([Conv2D(1, 2), Flatten(), Dense(10, 3)], (1, 4, 4))
    with pytest.raises(ValueError):
        Network([MaxPool2()], (1, 5, 4))


def test_stale_tape_rejected():
    net = Network([Dense(3, 2)], (3,))
    _, tape = net.forward(np.ones((1, 3)))
    net.set_flat(net.get_flat() + 1)
    with pytest.raises(StaleCacheError):
        net.backward(tape, np.ones((1, 2)))


def test_adam_first_step_closed_form():
    p = [np.array([1.0, -2.0, 0.5])]
    g = [np.array([0.3, -4.0, 1e-3])]
    m, v = [np.zeros(3)], [np.zeros(3)]
    adam_step(p, g, m, v, 1, lr=0.1)
    # bias-corrected first step moves each coordinate by lr * g / (|g| + eps)
    expect = np.array([1.0, -2.0, 0.5]) - 0.1 * g[0] / (np.abs(g[0]) + 1e-8)
    assert np.allclose(p[0], expect, atol=1e-12)


def test_adam_second_step_closed_form():
    b1, b2, lr, eps = 0.9, 0.999, 0.01, 1e-8
    g1, g2 = 2.0, -1.0
    p, m, v = [np.array([0.0])], [np.zeros(1)], [np.zeros(1)]
    adam_step(p, [np.array([g1])], m, v, 1, lr=lr)
    adam_step(p, [np.array([g2])], m, v, 2, lr=lr)
    m2 = (1 - b1) * (b1 * g1 + g2)
    v2 = (1 - b2) * (b2 * g1 ** 2 + g2 ** 2)
    step2 = lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)
    assert np.isclose(p[0][0], -lr * g1 / (abs(g1) + eps) - step2, atol=1e-14)


def test_adam_rejects_nonfinite():
    with pytest.raises(NonFiniteGradientError):
        adam_step([np.zeros(1)], [np.array([np.nan])], [np.zeros(1)], [np.zeros(1)], 1)
    with pytest.raises(ValueError):
        adam_step([np.zeros(1)], [np.zeros(1)], [np.zeros(1)], [np.zeros(1)], 0)


def test_adam_fits_linear_map():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((64, 3))
    Y = X @ np.array([[1.0], [-2.0], [0.5]]) + 0.25
    net = Network([Dense(3, 1)], (3,), seed=0)
    opt = Adam(net, lr=0.05)
    for _ in range(400):
        y, tape = net.forward(X)
        grads, _ = net.backward(tape, mse_loss(y, Y)[1])
        opt.step(grads)
    assert mse_loss(net.predict(X), Y)[0] < 1e-6


def test_config_round_trip_and_flat_params():
    net = _random_net(3)
    clone = Network.from_config(net.config())
    clone.set_flat(net.get_flat())
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8))
    assert np.array_equal(net.predict(x), clone.predict(x))
    with pytest.raises(ValueError):
        net.set_flat(np.zeros(net.n_params() + 1))


def test_predict_batching_consistent():
    net = _random_net(4)
    x = np.random.default_rng(5).standard_normal((7, 1, 8, 8))
    # BLAS may block differently per batch size, so only rounding-level agreement
    assert np.allclose(net.predict(x), net.predict(x, batch_size=3), rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), cin=st.integers(1, 4), cout=st.integers(1, 4))
def test_property_conv_oracle(seed, cin, cout):
    rng = np.random.default_rng(seed)
    net = Network([Conv2D(cin, cout)], (cin, 4, 6), seed=seed)
    x = rng.standard_normal((2, cin, 4, 6))
    p = net.layers[0].params
    assert np.allclose(net.predict(x), conv_oracle(x, p["W"], p["b"], 3), atol=1e-12)
