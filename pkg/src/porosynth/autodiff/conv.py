"""Convolution, normalisation and pooling ops."""
from __future__ import annotations

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch
from .tensor import make


def _windows(xp, k, s):
    w = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return w[:, :, ::s, ::s, ::s]


def _scatter_windows(cols, full_shape, k, s, n):
    """Overlap-add ``cols`` (B, C, X, Y, Z, k, k, k) into a (B, C, *full) array."""
    out = np.zeros(full_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            for m in range(k):
                out[:, :, i:i + s * n[0]:s, j:j + s * n[1]:s, m:m + s * n[2]:s] += cols[..., i, j, m]
    return out


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _crop(x, p):
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p, p:-p]


def conv3d(x, w, stride=1, padding=0):
    """Cross-correlation of (B, C, X, Y, Z) input with (O, C, k, k, k) weights."""
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1] or len(set(w.shape[2:])) != 1:
        raise ShapeMismatch(f"conv3d: input {x.shape} and weight {w.shape} are incompatible")
    k, s, p = w.shape[2], stride, padding
    xp = _pad(x.data, p)
    if min(xp.shape[2:]) < k:
        raise ShapeMismatch(f"conv3d: input {x.shape} smaller than kernel {w.shape}")
    win = _windows(xp, k, s)
    out = np.tensordot(win, w.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    n = out.shape[2:]

    def back(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        cols = np.tensordot(g, w.data, axes=([1], [0]))  # (B, X, Y, Z, C, k, k, k)
        cols = np.moveaxis(cols, 4, 1)
        gx = _scatter_windows(cols, xp.shape, k, s, n)
        return _crop(gx, p), gw

    return make(out, (x, w), back, "conv3d")


def conv3d_transpose(x, w, stride=1, padding=0):
    """Transposed convolution; weights are (C_in, C_out, k, k, k).

    Output side is ``(n - 1) * stride + k - 2 * padding``.
    """
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0] or len(set(w.shape[2:])) != 1:
        raise ShapeMismatch(f"conv3d_transpose: input {x.shape} and weight {w.shape} are incompatible")
    k, s, p = w.shape[2], stride, padding
    n = x.shape[2:]
    full = tuple((d - 1) * s + k for d in n)
    if min(full) - 2 * p < 1:
        raise ShapeMismatch(f"conv3d_transpose: padding {p} too large for input {x.shape}")
    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # (B, X, Y, Z, O, k, k, k)
    cols = np.moveaxis(cols, 4, 1)
    out = _crop(_scatter_windows(cols, (x.shape[0], w.shape[1]) + full, k, s, n), p)

    def back(g):
        gwin = _windows(_pad(g, p), k, s)  # (B, O, X, Y, Z, k, k, k)
        gx = np.tensordot(gwin, w.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        gx = np.moveaxis(gx, -1, 1)
        gw = np.tensordot(x.data, gwin, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        return gx, gw

    return make(np.ascontiguousarray(out), (x, w), back, "conv3d_transpose")


def conv2d_complex_freq(x, filters, pairs=None, real_output=False):
    """Periodic 2D convolution with filters given in the frequency domain.

    ``x`` is (..., M, N), real or complex, and ``filters`` is (K, M, N).
    Without ``pairs`` the result is (..., K, M, N). With ``pairs`` (a
    sequence of (input_index, filter_index)) and a (B, M, N) input, the
    result is (len(pairs), M, N).
    """
    h = np.asarray(filters)
    if h.ndim == 2:
        h = h[None]
    if x.shape[-2:] != h.shape[-2:]:
        raise ShapeMismatch(f"conv2d_complex_freq: image {x.shape} and filters {h.shape} differ")
    ctype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    h = h.astype(ctype, copy=False)
    xf = sfft.fft2(x.data)
    if pairs is None:
        prod = xf[..., None, :, :] * h
    else:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if x.ndim != 3:
            raise ShapeMismatch(f"conv2d_complex_freq: pairs need a (B, M, N) input, got {x.shape}")
        prod = xf[pairs[:, 0]] * h[pairs[:, 1]]
    out = sfft.ifft2(prod)
    if real_output:
        out = out.real.astype(x.data.real.dtype)

    def back(g):
        gf = sfft.fft2(g) * np.conj(h if pairs is None else h[pairs[:, 1]])
        if pairs is None:
            gx = sfft.ifft2(gf.sum(axis=-3))
        else:
            acc = np.zeros(x.shape, dtype=gf.dtype)
            np.add.at(acc, pairs[:, 0], gf)
            gx = sfft.ifft2(acc)
        return (gx,)

    return make(out, (x,), back, "conv2d_complex_freq")


def batchnorm(x, gamma, beta, eps=1e-5, training=True, running=None, momentum=0.1):
    """Per-channel normalisation over all axes except axis 1.

    ``running`` is a dict holding ``mean`` and ``var`` arrays. In training
    mode it is updated in place; otherwise its statistics are used.
    """
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batchnorm: input {x.shape} and parameters {gamma.shape}, {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    d = x.data
    if training:
        mu = d.mean(axis=axes, dtype=np.float64)
        var = d.var(axis=axes, dtype=np.float64)
        if running is not None:
            n = d.size / d.shape[1]
            if momentum is None:
                running["count"] = running.get("count", 0) + 1
                m = 1.0 / running["count"]
            else:
                m = momentum
            running["mean"] = (1 - m) * running["mean"] + m * mu
            running["var"] = (1 - m) * running["var"] + m * var * n / max(n - 1, 1)
    else:
        mu, var = running["mean"], running["var"]
    inv = (1.0 / np.sqrt(var + eps)).astype(d.dtype)
    xhat = (d - mu.reshape(shape).astype(d.dtype)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    n = d.size / d.shape[1]

    def back(g):
        gb = np.sum(g, axis=axes, dtype=np.float64)
        gg = np.sum(g * xhat, axis=axes, dtype=np.float64)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            s1 = np.sum(dxhat, axis=axes, dtype=np.float64).reshape(shape)
            s2 = np.sum(dxhat * xhat, axis=axes, dtype=np.float64).reshape(shape)
            gx = inv.reshape(shape) * (dxhat - (s1 + xhat * s2) / n)
        else:
            gx = dxhat * inv.reshape(shape)
        return gx, gg, gb

    return make(out.astype(d.dtype), (x, gamma, beta), back, "batchnorm")


def mean_pool(x, k):
    """Non-overlapping mean pooling over the spatial axes (2 onward)."""
    sp = x.shape[2:]
    if any(n % k for n in sp):
        raise ShapeMismatch(f"mean_pool: spatial shape {sp} not divisible by {k}")
    shape = x.shape[:2] + sum(((n // k, k) for n in sp), ())
    red = tuple(range(3, 2 + 2 * len(sp), 2))
    out = x.data.reshape(shape).mean(axis=red, dtype=np.float64).astype(x.dtype)

    def back(g):
        ge = np.expand_dims(g, red) / k ** len(sp)
        return (np.broadcast_to(ge, shape).reshape(x.shape).copy(),)

    return make(out, (x,), back, "mean_pool")
