"""Numba and numpy kernel paths must agree; either path must match finite
differences through a scalar probe loss."""

import numpy as np
import pytest

from fmwiss import kernels as K

SHAPES = [
    # (n, h, w, cin, cout, k, stride, dilation, pad)
    (2, 9, 9, 3, 5, 3, 1, 1, 1),
    (2, 9, 9, 3, 5, 3, 2, 1, 1),
    (1, 12, 12, 4, 6, 3, 1, 4, 4),
    (3, 7, 5, 2, 3, 1, 1, 1, 0),
]


def _setup(shape, seed=0):
    n, h, w, cin, cout, k, stride, dilation, pad = shape
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, h, w, cin))
    wt = rng.normal(size=(k, k, cin, cout))
    b = rng.normal(size=cout)
    return x, wt, b, (stride, dilation, pad)


@pytest.mark.parametrize("shape", SHAPES)
def test_numpy_path_matches_numba(shape):
    if not K.HAS_NUMBA:
        pytest.skip("numba unavailable")
    x, w, b, (s, d, p) = _setup(shape)
    y1 = K.conv2d_forward_np(x, w, b, stride=s, dilation=d, pad=p)
    y2 = K.conv2d_forward_nb(x, w, b, stride=s, dilation=d, pad=p)
    assert np.allclose(y1, y2, rtol=1e-11, atol=1e-11)

    dy = np.random.default_rng(1).normal(size=y1.shape)
    dw1, db1 = K.conv2d_backward_weights_np(x, dy, w.shape[0], w.shape[1], stride=s, dilation=d, pad=p)
    dw2, db2 = K.conv2d_backward_weights_nb(x, dy, w.shape[0], w.shape[1], stride=s, dilation=d, pad=p)
    assert np.allclose(dw1, dw2, rtol=1e-11, atol=1e-11)
    assert np.allclose(db1, db2, rtol=1e-11, atol=1e-11)

    dx1 = K.conv2d_backward_input_np(dy, w, x.shape[1], x.shape[2], stride=s, dilation=d, pad=p)
    dx2 = K.conv2d_backward_input_nb(dy, w, x.shape[1], x.shape[2], stride=s, dilation=d, pad=p)
    assert np.allclose(dx1, dx2, rtol=1e-11, atol=1e-11)


@pytest.mark.parametrize("shape", SHAPES[:2])
def test_conv_gradients_match_finite_differences(shape):
    x, w, b, (s, d, p) = _setup(shape, seed=2)
    g = np.random.default_rng(3).normal(size=K.conv2d_forward_np(x, w, b, stride=s, dilation=d, pad=p).shape)

    def probe():
        return float((K.conv2d_forward_np(x, w, b, stride=s, dilation=d, pad=p) * g).sum())

    dw, db = K.conv2d_backward_weights_np(x, g, w.shape[0], w.shape[1], stride=s, dilation=d, pad=p)
    dx = K.conv2d_backward_input_np(g, w, x.shape[1], x.shape[2], stride=s, dilation=d, pad=p)
    h = 1e-6
    rng = np.random.default_rng(4)
    for arr, grad in ((w, dw), (b, db), (x, dx)):
        for _ in range(4):
            idx = tuple(rng.integers(0, n) for n in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            hi = probe()
            arr[idx] = orig - h
            lo = probe()
            arr[idx] = orig
            fd = (hi - lo) / (2 * h)
            assert fd == pytest.approx(grad[idx], rel=1e-5, abs=1e-8)


def test_deterministic_repeat():
    x, w, b, (s, d, p) = _setup(SHAPES[0], seed=5)
    y1 = K.conv2d_forward(x, w, b, stride=s, dilation=d, pad=p)
    y2 = K.conv2d_forward(x, w, b, stride=s, dilation=d, pad=p)
    assert np.array_equal(y1, y2)


def test_out_size():
    assert K.out_size(64, 3, 2, 1, 1) == 32
    assert K.out_size(32, 3, 2, 1, 1) == 16
    assert K.out_size(16, 3, 1, 4, 4) == 16
    assert K.out_size(5, 1, 1, 1, 0) == 5


def test_sigmoid_stable_extremes():
    z = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    p = K.sigmoid(z)
    assert np.all(np.isfinite(p))
    assert p[0] == 0.0 or p[0] < 1e-300
    assert p[2] == 0.5
    assert p[4] == 1.0 or p[4] > 1 - 1e-12
