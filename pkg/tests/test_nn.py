import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm as normal_dist

from omgrl import checkpoint
from omgrl.errors import NumericError, ShapeError, StateError
from omgrl.nn import (LOGVAR_MAX, LOGVAR_MIN, DenseNet, adam_init, adam_step, backward, finite_difference,
                      forward, gaussian_nll, grad_check, init_dense, relative_error, soft_clamp_logvar)


def _net(sizes, weights, biases, hidden="tanh", out="linear"):
    return DenseNet(sizes, [np.asarray(w, float) for w in weights], [np.asarray(b, float) for b in biases],
                    hidden, out)


def test_zero_weights_return_bias():
    b = np.array([0.5, -2.0, 3.0])
    net = _net((4, 3), [np.zeros((3, 4))], [b])
    out, _ = forward(net, np.array([1.0, -7.0, 2.0, 9.0]))
    np.testing.assert_array_equal(out, b)


def test_softmax_of_equal_logits_is_uniform():
    net = _net((3, 6), [np.zeros((6, 3))], [np.zeros(6)], out="softmax")
    out, _ = forward(net, np.ones(3))
    np.testing.assert_allclose(out, np.full(6, 1 / 6), atol=1e-15)


def test_hand_evaluated_tanh_network():
    W0, b0 = [[0.3, -0.7], [1.1, 0.4]], [0.1, -0.2]
    W1, b1 = [[0.8, -1.3]], [0.05]
    net = _net((2, 2, 1), [W0, W1], [b0, b1])
    x1, x2 = 0.9, -0.4
    h1 = math.tanh(0.3 * x1 - 0.7 * x2 + 0.1)
    h2 = math.tanh(1.1 * x1 + 0.4 * x2 - 0.2)
    expected = 0.8 * h1 - 1.3 * h2 + 0.05
    out, _ = forward(net, np.array([x1, x2]))
    assert abs(out[0] - expected) <= 1e-12


def test_linear_layer_closed_form_gradients(rng):
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    net = _net((4, 3), [W], [b])
    x, g = rng.normal(size=4), rng.normal(size=3)
    _, cache = forward(net, x)
    grads, dx = backward(net, cache, g)
    np.testing.assert_allclose(grads[0], np.outer(g, x), atol=1e-14)
    np.testing.assert_allclose(grads[1], g, atol=1e-14)
    np.testing.assert_allclose(dx, W.T @ g, atol=1e-14)


def test_shape_and_state_errors(rng):
    net = init_dense([3, 5, 2], rng)
    with pytest.raises(ShapeError):
        forward(net, np.ones(4))
    with pytest.raises(StateError):
        backward(net, None, np.ones(2))
    other = init_dense([3, 4, 2], rng)
    _, cache = forward(other, np.ones(3))
    with pytest.raises(StateError):
        backward(net, cache, np.ones(2))
    with pytest.raises(ShapeError):
        DenseNet((3, 2), [np.zeros((3, 2))], [np.zeros(2)])
    with pytest.raises(ShapeError):
        DenseNet((3,), [], [])


def test_backward_is_deterministic(rng):
    net = init_dense([5, 8, 4], rng, "relu", "softmax")
    x, g = rng.normal(size=(7, 5)), rng.normal(size=(7, 4))
    a = backward(net, forward(net, x)[1], g)[0]
    b = backward(net, forward(net, x)[1], g)[0]
    for p, q in zip(a, b):
        assert np.array_equal(p, q)


@given(st.integers(0, 10_000), st.sampled_from(["relu", "tanh"]))
def test_softmax_outputs_on_simplex(seed, hidden):
    r = np.random.default_rng(seed)
    net = init_dense([4, 6, 6], r, hidden, "softmax")
    out, _ = forward(net, r.normal(scale=5.0, size=(20, 4)))
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30))
def test_logvar_clamp_bounds(values):
    lv = soft_clamp_logvar(np.array(values))
    assert np.all(lv >= LOGVAR_MIN) and np.all(lv <= LOGVAR_MAX)


def test_gaussian_nll_matches_scipy(rng):
    mean, lv, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    loss, dm, dlv = gaussian_nll(mean, lv, y)
    ref = -np.sum(normal_dist.logpdf(y, mean, np.exp(0.5 * lv)))
    assert abs(loss - ref) <= 1e-10 * abs(ref)
    f = lambda p: gaussian_nll(p[0], p[1], y)[0]  # noqa: E731
    num = finite_difference(f, [mean, lv], 1e-6)
    assert relative_error(dm, num[0]) < 1e-6
    assert relative_error(dlv, num[1]) < 1e-6
    with pytest.raises(NumericError):
        gaussian_nll(mean, lv, np.full((5, 3), np.nan))


@pytest.mark.parametrize("head,out,hidden", [("linear", "linear", "relu"), ("linear", "linear", "tanh"),
                                             ("softmax", "softmax", "relu"), ("softmax", "softmax", "tanh"),
                                             ("gaussian", "gaussian_head", "relu"),
                                             ("gaussian", "gaussian_head", "tanh")])
def test_grad_check_every_head(head, out, hidden, rng):
    net = init_dense([5, 7, 6, 4], rng, hidden, out)
    err = grad_check(net, head, rng.normal(size=(3, 5)), rng=rng)
    assert err <= 1e-4


def test_adam_step_matches_hand_formula():
    p, g = [np.array([1.0, -2.0])], [np.array([0.5, -0.25])]
    state = adam_init(p, lr=0.1)
    new, state = adam_step(p, g, state)
    # first step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    np.testing.assert_allclose(new[0], p[0] - 0.1 * g[0] / (np.abs(g[0]) + 1e-8), atol=1e-15)
    assert state.t == 1
    new2, state2 = adam_step(new, g, state)
    m = 0.9 * (0.1 * g[0]) + 0.1 * g[0]
    v = 0.999 * (0.001 * g[0] ** 2) + 0.001 * g[0] ** 2
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(new2[0], new[0] - step, atol=1e-15)
    assert p[0][0] == 1.0  # inputs untouched


def test_adam_rejects_non_finite_gradients():
    p = [np.zeros(2), np.zeros(3)]
    state = adam_init(p, names=["W0", "b0"])
    with pytest.raises(NumericError, match="b0"):
        adam_step(p, [np.zeros(2), np.array([0.0, np.inf, 0.0])], state)


def test_adam_minimises_quadratic():
    p = [np.array([3.0, -4.0])]
    state = adam_init(p, lr=0.05)
    for _ in range(2000):
        p, state = adam_step(p, [2.0 * p[0]], state)
    assert np.all(np.abs(p[0]) < 1e-2)


def test_net_checkpoint_roundtrip_is_bitwise(tmp_path, rng):
    net = init_dense([4, 9, 3], rng, "tanh", "softmax")
    checkpoint.save_net(tmp_path / "n.ckpt", net)
    back, opt = checkpoint.load_net(tmp_path / "n.ckpt")
    assert opt is None
    assert back.layer_sizes == net.layer_sizes and back.output_activation == "softmax"
    for a, b in zip(net.params, back.params):
        assert a.tobytes() == b.tobytes()
    (tmp_path / "bad.ckpt").write_text("OMGRL-DYN v1\n{}\n")
    with pytest.raises(StateError):
        checkpoint.load_net(tmp_path / "bad.ckpt")
