import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from honeypot.errors import ConfigError, NumericError, TrainingError, UsageError
from honeypot.nn import (AvgPool, Conv2D, Dense, Flatten, Network, ReLU, SgdState, backward,
                         cross_entropy, fit, forward, grad_check, kl_divergence, kl_loss,
                         parse_layers, relative_error, sgd_step, softmax)


def conv_oracle(x, W, b, stride, pad):
    """Direct six-loop convolution."""
    n, c, h, w = x.shape
    o, _, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for s in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[f]
                    for ch in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += W[f, ch, di, dj] * xp[s, ch, i * stride + di, j * stride + dj]
                    out[s, f, i, j] = acc
    return out


# -- forward ---------------------------------------------------------------

def test_zero_dense_net_gives_zero_logits():
    net = Network((3,), [Dense(3, 4), ReLU(), Dense(4, 2)])
    net.set_flat_params(np.zeros(net.num_params))
    assert np.array_equal(net.logits(np.random.default_rng(0).uniform(size=(5, 3))), np.zeros((5, 2)))


def test_identity_dense():
    net = Network((2,), [Dense(2, 2)], params=[[np.eye(2), np.zeros(2)]])
    assert net.logits(np.array([[0.3, 0.7]])).tolist() == [[0.3, 0.7]]


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(1)
    layer = Conv2D(2, 3, 3, stride, pad)
    W, b = layer.init(rng)
    b = rng.standard_normal(3)
    x = rng.standard_normal((2, 2, 7, 6))
    y, _ = layer.forward([W, b], x)
    np.testing.assert_allclose(y, conv_oracle(x, W, b, stride, pad), rtol=0, atol=1e-12)


def test_avgpool_floor_crops():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    y, _ = AvgPool(2).forward([], x)
    assert y.shape == (1, 1, 2, 2)
    assert y[0, 0, 0, 0] == (0 + 1 + 5 + 6) / 4


def test_shape_mismatch_names_layer():
    with pytest.raises(ConfigError, match=r"layer 2 \(dense\(10,4\)\)"):
        Network((1, 4, 4), [Conv2D(1, 2, 3), Flatten(), Dense(10, 4)])
    net = Network((3,), [Dense(3, 2)])
    with pytest.raises(ConfigError, match="layer 0"):
        forward(net, np.zeros((2, 4)))


def test_forward_is_pure():
    net = Network((4,), [Dense(4, 3), ReLU(), Dense(3, 2)], seed=3)
    before = net.flat_params().copy()
    x = np.random.default_rng(0).standard_normal((6, 4))
    a, _ = forward(net, x)
    b, _ = forward(net, x)
    assert np.array_equal(a, b) and np.array_equal(before, net.flat_params())


def test_param_count_from_descriptor():
    net = Network.from_text((1, 16, 16), "conv(1,8,3,1,1);relu;avgpool(2);flatten;dense(512,10)")
    assert net.num_params == 8 * 9 + 8 + 512 * 10 + 10
    assert parse_layers(net.describe().split("|")[2]) == net.layers


def test_init_is_seeded_glorot():
    a = Network((5,), [Dense(5, 7)], seed=11)
    b = Network((5,), [Dense(5, 7)], seed=11)
    assert np.array_equal(a.flat_params(), b.flat_params())
    W, bias = a.params[0]
    assert np.abs(W).max() <= math.sqrt(6 / 12) and not bias.any()


def test_unknown_layer_rejected():
    with pytest.raises(ConfigError):
        parse_layers("dense(2,2);maxpool(2)")


# -- backward --------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients():
    net = Network((1, 6, 6), parse_layers("conv(1,2,3,1,1);relu;avgpool(2);flatten;dense(18,3)"), seed=2)
    x = np.random.default_rng(0).uniform(size=(3, 1, 6, 6))
    logits, cache = forward(net, x)
    grads, dx = backward(net, cache, np.zeros_like(logits))
    assert not dx.any() and all(not g.any() for gs in grads for g in gs)


def test_scalar_chain_rule():
    net = Network((1,), [Dense(1, 1)], params=[[np.array([[2.5]]), np.array([0.0])]])
    _, cache = forward(net, np.array([[0.4]]))
    grads, dx = backward(net, cache, np.array([[1.0]]))
    assert dx[0, 0] == 2.5 and grads[0][0][0, 0] == 0.4


def test_stale_cache_rejected():
    net = Network((3,), [Dense(3, 2)])
    logits, cache = forward(net, np.ones((1, 3)))
    net.set_flat_params(net.flat_params())
    with pytest.raises(UsageError):
        backward(net, cache, np.ones_like(logits))
    other = net.copy()
    _, cache = forward(net, np.ones((1, 3)))
    with pytest.raises(UsageError):
        backward(other, cache, np.ones((1, 2)))


def test_linear_net_grad_check_is_tight():
    net = Network((5,), [Dense(5, 4), Dense(4, 3)], seed=4)
    report = grad_check(net, np.random.default_rng(0).standard_normal((3, 5)))
    assert report.max_error < 1e-10


def test_corrupted_gradient_is_caught_on_its_layer():
    net = Network((4,), [Dense(4, 5), ReLU(), Dense(5, 3)], seed=5)
    x = np.random.default_rng(1).standard_normal((2, 4))

    def faulty(net_, batch, dlogits):
        grads, dx = backward(net_, forward(net_, batch)[1], dlogits)
        grads[2][0] = grads[2][0] * 1.01
        return grads, dx

    report = grad_check(net, x, grad_fn=faulty)
    assert not report.passed
    assert report.failing_layers == ["2:dense(5,3)"]


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.sampled_from([1, 2, 3]), pad=st.sampled_from([0, 1]),
       stride=st.sampled_from([1, 2]))
def test_conv_net_gradients_match_finite_differences(seed, k, pad, stride):
    rng = np.random.default_rng(seed)
    net = Network((2, 5, 5), [Conv2D(2, 3, k, stride, pad), Flatten()], seed=seed)
    dim = net.shapes[-1][0]
    net = Network((2, 5, 5), [Conv2D(2, 3, k, stride, pad), Flatten(), Dense(dim, 3)], seed=seed)
    report = grad_check(net, rng.standard_normal((2, 2, 5, 5)), rng=rng)
    assert report.passed, report


# -- losses ----------------------------------------------------------------

def test_softmax_closed_forms():
    np.testing.assert_allclose(softmax(np.array([[2.0, 2.0, 2.0]])), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(softmax(np.array([[1000.0, 0.0]])), [[1.0, 0.0]], atol=1e-12)
    direct = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    np.testing.assert_allclose(softmax(np.array([[1.0, 2.0, 3.0]]))[0], direct, rtol=1e-14)
    with pytest.raises(NumericError):
        softmax(np.array([[np.nan, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(z, c):
    z = np.array([z])
    p = softmax(z)
    assert abs(p.sum() - 1.0) < 1e-12 and (p >= 0).all()
    np.testing.assert_allclose(softmax(z + c), p, atol=1e-12)


def test_cross_entropy_closed_forms():
    loss, grad = cross_entropy(np.zeros((1, 10)), np.array([3]))
    assert loss == pytest.approx(math.log(10), abs=1e-15)
    np.testing.assert_allclose(grad[0], np.full(10, 0.1) - np.eye(10)[3], atol=1e-15)
    loss, _ = cross_entropy(np.array([[800.0, 0.0, 0.0]]), np.array([0]))
    assert loss == 0.0
    with pytest.raises(UsageError):
        cross_entropy(np.zeros((1, 3)), np.array([3]))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), soft=st.booleans())
def test_cross_entropy_value_and_gradient(seed, soft):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, 5)) * 3
    t = softmax(rng.standard_normal((4, 5))) if soft else rng.integers(0, 5, size=4)
    loss, grad = cross_entropy(z, t)
    tt = t if soft else np.eye(5)[t]
    direct = -(tt * np.log(np.exp(z) / np.exp(z).sum(1, keepdims=True))).sum() / 4
    assert loss >= 0 and loss == pytest.approx(direct, abs=1e-10)
    h, numeric = 1e-5, np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        up, down = z.copy(), z.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = (cross_entropy(up, t)[0] - cross_entropy(down, t)[0]) / (2 * h)
    assert relative_error(grad, numeric) < 1e-6


def test_kl_divergence():
    assert kl_divergence([[0.2, 0.8]], [[0.2, 0.8]]) == 0.0
    assert kl_divergence([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(math.log(2), abs=1e-15)
    rng = np.random.default_rng(3)
    p, q = softmax(rng.standard_normal((1, 6))), softmax(rng.standard_normal((1, 6)))
    assert kl_divergence(p, q) == pytest.approx(float((p * np.log(p / q)).sum()), rel=1e-13)
    with pytest.raises(UsageError):
        kl_divergence([[1.2, -0.2]], [[0.5, 0.5]])


def test_kl_loss_gradient_equals_soft_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    z, t = rng.standard_normal((3, 4)), softmax(rng.standard_normal((3, 4)))
    kl, gk = kl_loss(z, t)
    ce, gc = cross_entropy(z, t)
    entropy = -(t * np.log(t)).sum() / 3
    assert kl == pytest.approx(ce - entropy, abs=1e-12)
    np.testing.assert_array_equal(gk, gc)


# -- optimizer -------------------------------------------------------------

def test_cosine_schedule():
    s = SgdState([], base_lr=0.1, total_epochs=10)
    lrs = []
    for e in (0, 5, 10):
        s.current_epoch = e
        lrs.append(s.lr)
    assert lrs[0] == 0.1 and lrs[1] == pytest.approx(0.05, abs=1e-15) and lrs[2] == 0.0


def _one_param_net(value):
    return Network((1,), [Dense(1, 1)], params=[[np.array([[value]]), np.array([0.0])]])


def test_zero_gradient_is_fixed_point():
    net = _one_param_net(0.7)
    state = SgdState.for_network(net, 0.1)
    sgd_step(net, [[np.zeros((1, 1)), np.zeros(1)]], state)
    assert net.params[0][0][0, 0] == 0.7


def test_plain_sgd_step():
    net = _one_param_net(1.0)
    state = SgdState.for_network(net, 0.1, momentum=0.0)
    sgd_step(net, [[np.array([[0.5]]), np.zeros(1)]], state)
    assert net.params[0][0][0, 0] == 1.0 - 0.1 * 0.5


def test_momentum_two_steps_match_hand_recurrence():
    g, lr, m = 0.3, 0.1, 0.9
    net = _one_param_net(1.0)
    state = SgdState.for_network(net, lr, momentum=m, total_epochs=1)
    for _ in range(2):
        sgd_step(net, [[np.array([[g]]), np.zeros(1)]], state)
    v1 = g
    v2 = m * v1 + g
    assert net.params[0][0][0, 0] == pytest.approx(1.0 - lr * v1 - lr * v2, abs=1e-15)


def test_fit_is_bit_reproducible_and_learns():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((120, 4))
    y = (x[:, 0] + x[:, 1] > 0).astype(int)
    runs = []
    for _ in range(2):
        net = Network((4,), [Dense(4, 8), ReLU(), Dense(8, 2)], seed=9)
        hist = fit(net, x, y, 20, 0.1, np.random.default_rng(1))
        runs.append(net.flat_params())
    assert np.array_equal(*runs)
    assert hist[-1] < hist[0] * 0.5


def test_fit_aborts_on_nan():
    net = Network((2,), [Dense(2, 2)])
    with pytest.raises(TrainingError) as info:
        fit(net, np.array([[np.nan, 0.0]] * 4), np.zeros(4, int), 2, 0.1, np.random.default_rng(0),
            stage="probe")
    assert info.value.stage == "probe" and info.value.step == 0
