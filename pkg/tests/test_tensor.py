import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crest.gradcheck import max_relative_error, numerical_gradient
from crest.tensor import (FFT_MIN_TAPS, AdamState, ConvLayer, NonFiniteGradientError, ShapeError, adam_step,
                          conv2d_backward, conv2d_forward, l2_loss, relu_backward, relu_forward)


def naive_conv(x, w, b):
    """Six nested loops: zero-padded 'same' cross-correlation."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((o, h, wd))
    for oc in range(o):
        for i in range(h):
            for j in range(wd):
                acc = b[oc]
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - ph, j + dj - pw
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += w[oc, ic, di, dj] * x[ic, ii, jj]
                out[oc, i, j] = acc
    return out


@pytest.mark.parametrize("k", [1, 3, 5, 9])
def test_forward_matches_naive_loops(rng, k):
    x = rng.normal(size=(2, 10, 11))
    layer = ConvLayer.same(rng.normal(size=(3, 2, k, k)), rng.normal(size=3))
    np.testing.assert_allclose(conv2d_forward(x, layer), naive_conv(x, layer.weights, layer.bias), atol=1e-12)


def test_fft_path_kicks_in_for_large_kernels(rng):
    # 9x9 kernel is above the threshold; 3x3 below
    assert 9 * 9 >= FFT_MIN_TAPS > 3 * 3
    x = rng.normal(size=(1, 15, 15))
    layer = ConvLayer.same(rng.normal(size=(1, 1, 9, 9)))
    np.testing.assert_allclose(conv2d_forward(x, layer), naive_conv(x, layer.weights, layer.bias), atol=1e-12)


def test_identity_kernel():
    x = np.arange(20.0).reshape(1, 4, 5)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d_forward(x, ConvLayer.same(w)), x)


def test_kernel_is_correlation_not_convolution():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 2] = 1.0  # top-right tap
    out = conv2d_forward(x, ConvLayer.same(w))[0]
    # output (i, j) reads x[i - 1, j + 1], so the impulse lands at (3, 1)
    assert out[3, 1] == 1.0 and out.sum() == 1.0


@pytest.mark.parametrize("k", [1, 3, 7, 9])
def test_backward_finite_differences(rng, k):
    x = rng.normal(size=(2, 9, 9))
    layer = ConvLayer.same(rng.normal(size=(2, 2, k, k)), rng.normal(size=2))
    proj = rng.normal(size=(2, 9, 9))

    def f():
        return float(np.sum(conv2d_forward(x, layer) * proj))
    gx, gw, gb = conv2d_backward(x, layer, proj)
    assert max_relative_error(gx, numerical_gradient(f, x)) < 1e-6
    assert max_relative_error(gw, numerical_gradient(f, layer.weights)) < 1e-6
    assert max_relative_error(gb, numerical_gradient(f, layer.bias)) < 1e-6


def test_backward_skips_input_grad(rng):
    x = rng.normal(size=(1, 5, 5))
    layer = ConvLayer.same(rng.normal(size=(1, 1, 3, 3)))
    gx, gw, _ = conv2d_backward(x, layer, np.ones((1, 5, 5)), compute_input_grad=False)
    assert gx is None and gw.shape == (1, 1, 3, 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_forward_is_linear_in_input(seed, a, b):
    r = np.random.default_rng(seed)
    layer = ConvLayer.same(r.normal(size=(2, 2, 3, 3)))  # zero bias
    x1, x2 = r.normal(size=(2, 2, 6, 6))
    lhs = conv2d_forward(a * x1 + b * x2, layer)
    rhs = a * conv2d_forward(x1, layer) + b * conv2d_forward(x2, layer)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_layer_validation(rng):
    with pytest.raises(ShapeError):
        ConvLayer.same(rng.normal(size=(1, 1, 2, 3)))
    layer = ConvLayer.same(rng.normal(size=(1, 2, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d_forward(rng.normal(size=(3, 5, 5)), layer)


def test_relu_and_l2():
    x = np.array([[[-1.0, 0.0, 2.0]]])
    np.testing.assert_array_equal(relu_forward(x), [[[0.0, 0.0, 2.0]]])
    np.testing.assert_array_equal(relu_backward(x, np.ones_like(x)), [[[0.0, 0.0, 1.0]]])
    loss, g = l2_loss(np.array([1.0, 2.0]), np.array([0.0, 4.0]))
    assert loss == 5.0
    np.testing.assert_array_equal(g, [2.0, -4.0])


def test_adam_single_step_hand_value():
    # m_hat = g, v_hat = g^2, so the first step moves by lr * g / (|g| + eps)
    params, state = adam_step({"p": np.array([1.0])}, {"p": np.array([0.5])}, AdamState(), lr=0.1)
    assert params["p"][0] == pytest.approx(0.9, abs=1e-8)
    assert state.step == 1
    assert state.m["p"][0] == pytest.approx(0.05)
    assert state.v["p"][0] == pytest.approx(0.00025)


def test_adam_two_steps_hand_value():
    p, s = {"p": np.array([0.0])}, AdamState()
    p, s = adam_step(p, {"p": np.array([1.0])}, s, lr=1.0)
    p, s = adam_step(p, {"p": np.array([-1.0])}, s, lr=1.0)
    m = 0.9 * 0.1 - 0.1
    v = 0.999 * 0.001 + 0.001
    expected = -1.0 / (1.0 + 1e-8) - (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p["p"][0] == pytest.approx(expected, rel=1e-12)


def test_adam_zero_lr_and_purity():
    p0 = {"w": np.array([1.0, -2.0])}
    s0 = AdamState()
    p1, s1 = adam_step(p0, {"w": np.array([3.0, 4.0])}, s0, lr=0.0)
    np.testing.assert_array_equal(p1["w"], p0["w"])
    assert s0.step == 0 and not s0.m
    assert s1.step == 1


def test_adam_weight_decay_adds_to_gradient():
    a, _ = adam_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, AdamState(), lr=0.1, weight_decay=0.5)
    b, _ = adam_step({"w": np.array([2.0])}, {"w": np.array([2.0])}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(a["w"], b["w"])


def test_adam_rejects_nonfinite_and_mismatch():
    with pytest.raises(NonFiniteGradientError):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState(), lr=0.1)
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), lr=0.1)
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(2)}, AdamState(), lr=-1.0)
