"""Pure-numpy patch gather/scatter (the fallback lane).

Same contract and bit-identical output as the compiled extension: channels
last, float64, zero padding via an explicit padded copy, stride 1 or 2.
"""

from __future__ import annotations

import numpy as np

LANE = "numpy"


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Gather sliding patches into (N, Ho, Wo, kh, kw, C)."""
    xp = _pad2d(x, pad)
    n, c = x.shape[0], x.shape[3]
    ho = (x.shape[1] + 2 * pad - kh) // stride + 1
    wo = (x.shape[2] + 2 * pad - kw) // stride + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, :, ky, kx, :] = xp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :]
    return cols


def col2im_add(gcols: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch gradients back onto an (N, H, W, C) zero canvas."""
    n, h, wid, c = x_shape
    _, ho, wo, kh, kw, _ = gcols.shape
    gxp = np.zeros((n, h + 2 * pad, wid + 2 * pad, c), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            gxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += gcols[:, :, :, ky, kx, :]
    if pad == 0:
        return gxp
    return np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + wid, :])
