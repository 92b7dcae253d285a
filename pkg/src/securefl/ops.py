"""Dtype-agnostic tensor kernels shared by the float model and the ring protocols."""

from __future__ import annotations

import numpy as np


def im2col(x: np.ndarray, k: int = 3, pad: int = 1) -> np.ndarray:
    """Unfold ``x`` of shape (N, C, H, W) into rows of (C*k*k) patch entries.

    Output shape is (N*H_out*W_out, C*k*k) with stride 1. Works for any dtype,
    including uint64 ring residues.
    """
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(n, ho, wo, c, k, k), strides=(s[0], s[2], s[3], s[1], s[2], s[3]), writeable=False)
    return view.reshape(n * ho * wo, c * k * k)


def col2im(cols: np.ndarray, x_shape, k: int = 3, pad: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back to an image batch."""
    n, c, h, w = x_shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x: np.ndarray, w: np.ndarray, pad: int = 1) -> np.ndarray:
    """Stride-1 cross-correlation of (N, C, H, W) input with (O, C, k, k) kernels, no bias."""
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    cols = im2col(x, k, pad)
    out = cols @ w.reshape(o, -1).T
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def sum_pool2(x: np.ndarray) -> np.ndarray:
    """Sum over non-overlapping 2x2 windows (H and W must be even)."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
