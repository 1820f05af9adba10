"""Convolution kernels used by the reference nets.

Two implementations of every kernel: a numba-jitted direct loop (the hot
path) and a pure-numpy im2col fallback. The numba path is used whenever
numba imports cleanly; set FMWISS_NO_NUMBA=1 to force the numpy path.
Both paths agree to ~1e-12 relative (summation order differs), and each
path is bitwise deterministic run to run.

Layouts are channels-last: inputs (N, H, W, Cin), weights (kh, kw, Cin,
Cout). `benchmarks/benchmark_kernels.py` compares the two paths.
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("FMWISS_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAS_NUMBA = False

NUMBA_ENABLED = HAS_NUMBA and not _FORCE_NUMPY


def out_size(size, k, stride, dilation, pad):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# pure numpy path


def _gather_cols(x, kh, kw, stride, dilation, pad, ho, wo):
    n, _, _, ci = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, ci))
    for u in range(kh):
        for v in range(kw):
            i0, j0 = u * dilation, v * dilation
            cols[:, :, :, u, v, :] = xp[:, i0 : i0 + ho * stride : stride, j0 : j0 + wo * stride : stride, :]
    return cols


def conv2d_forward_np(x, w, b, stride=1, dilation=1, pad=0):
    x, w, b = _as_f64(x), _as_f64(w), _as_f64(b)
    kh, kw = w.shape[0], w.shape[1]
    ho = out_size(x.shape[1], kh, stride, dilation, pad)
    wo = out_size(x.shape[2], kw, stride, dilation, pad)
    cols = _gather_cols(x, kh, kw, stride, dilation, pad, ho, wo)
    return np.tensordot(cols, w, axes=([3, 4, 5], [0, 1, 2])) + b


def conv2d_backward_weights_np(x, dy, kh, kw, stride=1, dilation=1, pad=0):
    x, dy = _as_f64(x), _as_f64(dy)
    ho, wo = dy.shape[1], dy.shape[2]
    cols = _gather_cols(x, kh, kw, stride, dilation, pad, ho, wo)
    dw = np.tensordot(cols, dy, axes=([0, 1, 2], [0, 1, 2]))
    return dw, dy.sum(axis=(0, 1, 2))


def conv2d_backward_input_np(dy, w, h, wdt, stride=1, dilation=1, pad=0):
    dy, w = _as_f64(dy), _as_f64(w)
    n, ho, wo, _ = dy.shape
    kh, kw, ci, _ = w.shape
    dxp = np.zeros((n, h + 2 * pad, wdt + 2 * pad, ci))
    for u in range(kh):
        for v in range(kw):
            i0, j0 = u * dilation, v * dilation
            patch = np.tensordot(dy, w[u, v], axes=([3], [1]))
            dxp[:, i0 : i0 + ho * stride : stride, j0 : j0 + wo * stride : stride, :] += patch
    return dxp[:, pad : pad + h, pad : pad + wdt, :]


# ---------------------------------------------------------------------------
# numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _conv2d_forward_nb(x, w, b, stride, dilation, pad):
        n, h, wd, ci = x.shape
        kh, kw, _, co = w.shape
        ho = (h + 2 * pad - dilation * (kh - 1) - 1) // stride + 1
        wo = (wd + 2 * pad - dilation * (kw - 1) - 1) // stride + 1
        y = np.empty((n, ho, wo, co))
        for im in range(n):
            for oi in range(ho):
                bi = oi * stride - pad
                for oj in range(wo):
                    bj = oj * stride - pad
                    for c in range(co):
                        acc = b[c]
                        for u in range(kh):
                            ii = bi + u * dilation
                            if 0 <= ii < h:
                                for v in range(kw):
                                    jj = bj + v * dilation
                                    if 0 <= jj < wd:
                                        for k in range(ci):
                                            acc += x[im, ii, jj, k] * w[u, v, k, c]
                        y[im, oi, oj, c] = acc
        return y

    @njit(cache=True)
    def _conv2d_backward_weights_nb(x, dy, kh, kw, stride, dilation, pad):
        n, h, wd, ci = x.shape
        _, ho, wo, co = dy.shape
        dw = np.zeros((kh, kw, ci, co))
        db = np.zeros(co)
        for im in range(n):
            for oi in range(ho):
                bi = oi * stride - pad
                for oj in range(wo):
                    bj = oj * stride - pad
                    for c in range(co):
                        g = dy[im, oi, oj, c]
                        db[c] += g
                        for u in range(kh):
                            ii = bi + u * dilation
                            if 0 <= ii < h:
                                for v in range(kw):
                                    jj = bj + v * dilation
                                    if 0 <= jj < wd:
                                        for k in range(ci):
                                            dw[u, v, k, c] += x[im, ii, jj, k] * g
        return dw, db

    @njit(cache=True)
    def _conv2d_backward_input_nb(dy, w, h, wd, stride, dilation, pad):
        n, ho, wo, co = dy.shape
        kh, kw, ci, _ = w.shape
        dx = np.zeros((n, h, wd, ci))
        for im in range(n):
            for oi in range(ho):
                bi = oi * stride - pad
                for oj in range(wo):
                    bj = oj * stride - pad
                    for c in range(co):
                        g = dy[im, oi, oj, c]
                        for u in range(kh):
                            ii = bi + u * dilation
                            if 0 <= ii < h:
                                for v in range(kw):
                                    jj = bj + v * dilation
                                    if 0 <= jj < wd:
                                        for k in range(ci):
                                            dx[im, ii, jj, k] += w[u, v, k, c] * g
        return dx

    def conv2d_forward_nb(x, w, b, stride=1, dilation=1, pad=0):
        return _conv2d_forward_nb(_as_f64(x), _as_f64(w), _as_f64(b), stride, dilation, pad)

    def conv2d_backward_weights_nb(x, dy, kh, kw, stride=1, dilation=1, pad=0):
        return _conv2d_backward_weights_nb(_as_f64(x), _as_f64(dy), kh, kw, stride, dilation, pad)

    def conv2d_backward_input_nb(dy, w, h, wdt, stride=1, dilation=1, pad=0):
        return _conv2d_backward_input_nb(_as_f64(dy), _as_f64(w), h, wdt, stride, dilation, pad)


if NUMBA_ENABLED:
    conv2d_forward = conv2d_forward_nb
    conv2d_backward_weights = conv2d_backward_weights_nb
    conv2d_backward_input = conv2d_backward_input_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward_weights = conv2d_backward_weights_np
    conv2d_backward_input = conv2d_backward_input_np


# ---------------------------------------------------------------------------
# elementwise helpers (vectorized numpy is already the fast path here)


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(z):
    return np.maximum(z, 0.0)
