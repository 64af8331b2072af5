"""Convolution kernels: patch movement lanes plus one shared BLAS GEMM.

Convolution forward/backward factor into (a) gathering sliding patches into
a GEMM-ready matrix, (b) a dense matmul, and (c) scattering patch gradients
back onto the image.  The matmul is always numpy/BLAS; the gather/scatter
hot loops come from the compiled extension when it is importable and from
numpy slicing otherwise, selected at import.  Both lanes produce
bit-identical arrays.

Set DIFFDESK_FORCE_NUMPY=1 to pin the pure-numpy lane (used by the
lane-equivalence tests and the benchmark).
"""

import os

import numpy as np

from . import numpy_kernels

if os.environ.get("DIFFDESK_FORCE_NUMPY") == "1":
    _impl = numpy_kernels
else:
    try:
        from . import _convcore as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = numpy_kernels

LANE = _impl.LANE
_im2col = _impl.im2col
_col2im_add = _impl.col2im_add


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """x: (N, H, W, Cin), w: (kh, kw, Cin, Cout) -> (N, Ho, Wo, Cout)."""
    kh, kw, cin, cout = w.shape
    n = x.shape[0]
    ho = _out_extent(x.shape[1], kh, stride, pad)
    wo = _out_extent(x.shape[2], kw, stride, pad)
    if kh == 1 and kw == 1 and stride == 1:
        return (x.reshape(-1, cin) @ w.reshape(cin, cout)).reshape(n, ho, wo, cout)
    cols = _im2col(x, kh, kw, stride, pad)
    out = cols.reshape(n * ho * wo, kh * kw * cin) @ w.reshape(kh * kw * cin, cout)
    return out.reshape(n, ho, wo, cout)


def conv2d_backward_input(go: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    """Gradient w.r.t. the conv input. go: (N, Ho, Wo, Cout)."""
    kh, kw, cin, cout = w.shape
    n, ho, wo = go.shape[0], go.shape[1], go.shape[2]
    if kh == 1 and kw == 1 and stride == 1:
        gx = go.reshape(-1, cout) @ w.reshape(cin, cout).T
        return gx.reshape(x_shape)
    gcols = go.reshape(n * ho * wo, cout) @ w.reshape(kh * kw * cin, cout).T
    return _col2im_add(gcols.reshape(n, ho, wo, kh, kw, cin), tuple(x_shape), stride, pad)


def conv2d_backward_weight(go: np.ndarray, x: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    """Gradient w.r.t. the conv weight. Returns (kh, kw, Cin, Cout)."""
    kh, kw, cin, cout = w_shape
    n, ho, wo = go.shape[0], go.shape[1], go.shape[2]
    if kh == 1 and kw == 1 and stride == 1:
        gw = x.reshape(-1, cin).T @ go.reshape(-1, cout)
        return gw.reshape(w_shape)
    cols = _im2col(x, kh, kw, stride, pad)
    gw = cols.reshape(n * ho * wo, kh * kw * cin).T @ go.reshape(n * ho * wo, cout)
    return gw.reshape(kh, kw, cin, cout)


__all__ = [
    "LANE",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "numpy_kernels",
]
