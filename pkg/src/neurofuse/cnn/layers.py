"""Batched 3D layer kernels: convolution, max pooling, fully connected.

Convolutions are same-padding, stride-1 cross-correlations evaluated in the
frequency domain: both operands are zero-padded to a fast FFT size, channels
are contracted per frequency bin, and the valid window is sliced from the
inverse transform.  This avoids the 125x memory expansion of im2col and is
substantially faster on modest hardware.  Each transform is computed
independently (batch-level parallelism only), so results do not depend on
the worker count.

Gradients are exact for every kernel here; the finite-difference tests pin
that down in float64.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

_KERNEL = 5
_HALO = _KERNEL // 2  # same-padding margin


def _fft_shape(spatial):
    return tuple(sfft.next_fast_len(d + 2 * _HALO, real=True) for d in spatial)


def _complex_dtype(real_dtype):
    return np.complex64 if real_dtype == np.float32 else np.complex128


def conv3d_forward(x, w, b):
    """Cross-correlate ``x`` (N,C,D,H,W) with ``w`` (K,C,5,5,5), add bias.

    Returns the pre-activation output (N,K,D,H,W) and a cache holding the
    frequency-domain operands for the backward pass.
    """
    spatial = x.shape[2:]
    pads = _fft_shape(spatial)
    axes = (2, 3, 4)
    xf = sfft.rfftn(x, s=pads, axes=axes, workers=-1)
    wf = sfft.rfftn(w, s=pads, axes=axes, workers=-1)
    yf = np.einsum("ncxyz,kcxyz->nkxyz", xf, np.conj(wf), optimize=True)
    full = sfft.irfftn(yf, s=pads, axes=axes, workers=-1)
    full = np.roll(full, (_HALO, _HALO, _HALO), axis=axes)
    y = full[:, :, : spatial[0], : spatial[1], : spatial[2]].astype(x.dtype, copy=False)
    y = y + b[None, :, None, None, None]
    cache = (xf, wf, x.shape, w.shape, x.dtype)
    return y, cache


def conv3d_backward(dy, cache):
    """Gradients for conv3d_forward; returns (dx, dw, db)."""
    xf, wf, x_shape, w_shape, dtype = cache
    spatial = x_shape[2:]
    pads = _fft_shape(spatial)
    axes = (2, 3, 4)
    df = sfft.rfftn(dy, s=pads, axes=axes, workers=-1)

    dxf = np.einsum("nkxyz,kcxyz->ncxyz", df, wf, optimize=True)
    dx_full = sfft.irfftn(dxf, s=pads, axes=axes, workers=-1)
    dx = dx_full[
        :, :, _HALO : _HALO + spatial[0], _HALO : _HALO + spatial[1], _HALO : _HALO + spatial[2]
    ].astype(dtype, copy=False)

    dwf = np.einsum("nkxyz,ncxyz->kcxyz", np.conj(df), xf, optimize=True)
    cc = sfft.irfftn(dwf, s=pads, axes=axes, workers=-1)
    cc = np.roll(cc, (_HALO, _HALO, _HALO), axis=axes)
    dw = cc[:, :, :_KERNEL, :_KERNEL, :_KERNEL].astype(dtype, copy=False)

    db = dy.sum(axis=(0, 2, 3, 4))
    return dx, dw, db


def relu_forward(x):
    y = np.maximum(x, 0)
    return y, y


def relu_backward(dy, y):
    return dy * (y > 0)


def maxpool_forward(x):
    """2x2x2 max pooling with stride 2; trailing odd voxels are dropped."""
    n, c, d, h, w = x.shape
    d2, h2, w2 = d // 2, h // 2, w // 2
    xc = x[:, :, : 2 * d2, : 2 * h2, : 2 * w2]
    win = (
        xc.reshape(n, c, d2, 2, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d2, h2, w2, 8)
    )
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx)


def maxpool_backward(dy, cache):
    x_shape, idx = cache
    n, c, d, h, w = x_shape
    d2, h2, w2 = d // 2, h // 2, w // 2
    grad_win = np.zeros((n, c, d2, h2, w2, 8), dtype=dy.dtype)
    np.put_along_axis(grad_win, idx[..., None], dy[..., None], axis=-1)
    dxc = (
        grad_win.reshape(n, c, d2, h2, w2, 2, 2, 2)
        .transpose(0, 1, 2, 5, 3, 6, 4, 7)
        .reshape(n, c, 2 * d2, 2 * h2, 2 * w2)
    )
    if (2 * d2, 2 * h2, 2 * w2) == (d, h, w):
        return dxc
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, : 2 * d2, : 2 * h2, : 2 * w2] = dxc
    return dx


def fc_forward(x, w, b):
    return x @ w + b, x


def fc_backward(dy, x, w):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
