"""Dense op kernels against naive reference implementations."""

import numpy as np
import pytest

from miniflow import tensor as T


# ---------------------------------------------------------------------------
# reference implementations (independent naive loops, float64)

def conv_ref(x, w, bias, stride, pad):
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, cout, oh, ow), dtype=np.float64)
    for bi in range(b):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[bi, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[bi, co, i, j] = np.sum(patch * w[co]) + bias[co]
    return out


def pool_ref(x, k):
    b, c, h, w = x.shape
    out = np.zeros((b, c, h // k, w // k), dtype=np.float64)
    for i in range(h // k):
        for j in range(w // k):
            out[:, :, i, j] = x[:, :, i * k:(i + 1) * k, j * k:(j + 1) * k].mean(axis=(2, 3))
    return out


CONV_CASES = [
    # kh, kw, cin, cout, stride, pad, h, w
    (3, 3, 4, 6, 1, 1, 9, 11),
    (1, 1, 5, 3, 1, 0, 7, 7),
    (7, 7, 2, 3, 2, 3, 12, 14),
    (3, 3, 3, 4, 2, 1, 10, 8),
    (5, 5, 1, 2, 1, 0, 8, 8),
]


@pytest.mark.parametrize("kh,kw,cin,cout,stride,pad,h,w", CONV_CASES)
def test_conv2d_matches_reference(kh, kw, cin, cout, stride, pad, h, w):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((cin, h, w))
    wt = rng.standard_normal((cout, cin, kh, kw))
    b = rng.standard_normal(cout)
    spec = T.ConvSpec(kh, kw, cin, cout, stride, pad)
    got = T.conv2d(x, wt, b, spec)
    want = conv_ref(x[None], wt, b, stride, pad)[0]
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kh,kw,cin,cout,stride,pad,h,w", CONV_CASES)
def test_conv2d_adjoints(kh, kw, cin, cout, stride, pad, h, w):
    # <conv(x), g> == <x, input_grad(g)> and == <w, weight_grad> + <b, g-sums>
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, cin, h, w))
    wt = rng.standard_normal((cout, cin, kh, kw))
    b = rng.standard_normal(cout)
    out, cols = T.conv2d_b(x, wt, b, stride, pad)
    g = rng.standard_normal(out.shape)
    lhs = np.sum((out - b[:, None, None]) * g)  # bias removed: linear part only
    dx = T.conv2d_input_grad(g, wt, stride, pad, (h, w))
    assert dx.shape == x.shape
    np.testing.assert_allclose(lhs, np.sum(x * dx), rtol=1e-10, atol=1e-10)
    dw = T.conv2d_weight_grad(cols, g, wt.shape)
    assert dw.shape == wt.shape
    np.testing.assert_allclose(lhs, np.sum(wt * dw), rtol=1e-10, atol=1e-10)


def test_avg_pool_worked_example():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    got = T.avg_pool2d(x, 2)
    np.testing.assert_array_equal(got[0], [[2.5, 4.5], [10.5, 12.5]])


def test_avg_pool_matches_reference():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 8, 12))
    np.testing.assert_allclose(T.avg_pool2d_b(x, 4), pool_ref(x, 4), atol=1e-12)


def test_avg_pool_requires_divisible_extents():
    with pytest.raises(T.ShapeError):
        T.avg_pool2d(np.zeros((1, 5, 4)), 2)


def test_avg_pool_grad_is_adjoint():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 6, 6))
    y = T.avg_pool2d_b(x, 2)
    g = rng.standard_normal(y.shape)
    dx = T.avg_pool2d_grad(g, 2)
    np.testing.assert_allclose(np.sum(y * g), np.sum(x * dx), rtol=1e-12)


def test_conv_shape_validation_names_offender():
    spec = T.ConvSpec(3, 3, 4, 6)
    x = np.zeros((5, 8, 8))
    w = np.zeros((6, 4, 3, 3))
    b = np.zeros(6)
    with pytest.raises(T.ShapeError, match="channels"):
        T.conv2d(x, w, b, spec)
    with pytest.raises(T.ShapeError, match="weight"):
        T.conv2d(np.zeros((4, 8, 8)), np.zeros((6, 4, 3, 5)), b, spec)
    with pytest.raises(T.ShapeError, match="extent"):
        T.conv2d(np.zeros((4, 2, 2)), w, b, spec)  # 2x2 input, 3x3 kernel, pad 0


def test_out_extent_formula():
    spec = T.ConvSpec(7, 7, 1, 1, stride=2, pad=3)
    assert spec.out_extent(64, 64) == (32, 32)
    assert T.ConvSpec(3, 3, 1, 1, stride=2, pad=1).out_extent(32, 32) == (16, 16)


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise"):
        y = T.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0], atol=1e-300)


def test_softmax_channel_normalizes_and_shifts():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 6, 4, 4))
    y = T.softmax_channel(x)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax_channel(x + 123.0), y, atol=1e-12)
    # large logits must not overflow
    with np.errstate(over="raise"):
        T.softmax_channel(x * 1e4)


def test_concat_channels_rejects_spatial_mismatch():
    a = np.zeros((1, 2, 4, 4))
    b = np.zeros((1, 3, 4, 5))
    with pytest.raises(T.ShapeError, match="1"):  # offending input index
        T.concat_channels([a, b])
