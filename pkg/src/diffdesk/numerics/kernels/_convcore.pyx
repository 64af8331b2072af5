# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled patch gather/scatter kernels for convolution.

The GEMM itself is BLAS territory; what dominates the pure-numpy lane is
assembling the im2col patch matrix and scattering its gradient back.  These
loops do exactly that movement in C, with zero padding handled by bounds
checks, producing bit-identical arrays to the numpy slicing fallback.

Layout is channels-last: images (N, H, W, C), patch matrices
(N, Ho, Wo, kh, kw, C).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

LANE = "compiled"


def im2col(cnp.ndarray[double, ndim=4] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wid = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wid + 2 * pad - kw) // stride + 1

    cols_arr = np.empty((n, ho, wo, kh, kw, c), dtype=np.float64)
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, :, :, :, :, ::1] cv = cols_arr

    cdef Py_ssize_t i, oy, ox, ky, kx, ic, yy, xx
    for i in range(n):
        for oy in range(ho):
            for ky in range(kh):
                yy = oy * stride + ky - pad
                if 0 <= yy < h:
                    for ox in range(wo):
                        for kx in range(kw):
                            xx = ox * stride + kx - pad
                            if 0 <= xx < wid:
                                for ic in range(c):
                                    cv[i, oy, ox, ky, kx, ic] = xv[i, yy, xx, ic]
                            else:
                                for ic in range(c):
                                    cv[i, oy, ox, ky, kx, ic] = 0.0
                else:
                    for ox in range(wo):
                        for kx in range(kw):
                            for ic in range(c):
                                cv[i, oy, ox, ky, kx, ic] = 0.0
    return cols_arr


def col2im_add(cnp.ndarray gcols, x_shape, int stride, int pad):
    """Scatter-add patch gradients back onto an (N, H, W, C) zero canvas.

    Accumulation runs (ky, kx)-major so each target element receives its
    contributions in exactly the order the numpy slicing lane produces,
    keeping the two lanes bit-identical.
    """
    cdef Py_ssize_t n = x_shape[0], h = x_shape[1], wid = x_shape[2], c = x_shape[3]
    gc = np.ascontiguousarray(gcols, dtype=np.float64)
    cdef Py_ssize_t ho = gc.shape[1], wo = gc.shape[2], kh = gc.shape[3], kw = gc.shape[4]

    gx_arr = np.zeros((n, h, wid, c), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] gv = gc
    cdef double[:, :, :, ::1] gxv = gx_arr

    cdef Py_ssize_t i, oy, ox, ky, kx, ic, yy, xx
    for ky in range(kh):
        for kx in range(kw):
            for i in range(n):
                for oy in range(ho):
                    yy = oy * stride + ky - pad
                    if 0 <= yy < h:
                        for ox in range(wo):
                            xx = ox * stride + kx - pad
                            if 0 <= xx < wid:
                                for ic in range(c):
                                    gxv[i, yy, xx, ic] += gv[i, oy, ox, ky, kx, ic]
    return gx_arr
