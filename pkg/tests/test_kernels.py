"""Kernel lane tests: brute-force conv oracle and lane bit-equality."""

import numpy as np
import pytest

from diffdesk.numerics import kernels
from diffdesk.numerics.kernels import numpy_kernels
from diffdesk.rng import Rng

LANES = [("active", kernels._impl), ("numpy", numpy_kernels)]


def conv_brute_force(x, w, stride, pad):
    """Reference convolution: plain quadruple loop over output positions."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((n, ho, wo, cout))
    for i in range(n):
        for oy in range(ho):
            for ox in range(wo):
                patch = xp[i, oy * stride : oy * stride + kh, ox * stride : ox * stride + kw, :]
                for oc in range(cout):
                    out[i, oy, ox, oc] = np.sum(patch * w[:, :, :, oc])
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 2, 5)])
def test_forward_matches_brute_force(stride, pad, k):
    rng = Rng(5)
    x = rng.derive("x", stride, pad, k).normal((2, 8, 8, 3))
    w = rng.derive("w", stride, pad, k).normal((k, k, 3, 4))
    ref = conv_brute_force(x, w, stride, pad)
    got = kernels.conv2d_forward(x, w, stride, pad)
    assert np.max(np.abs(got - ref)) < 1e-12


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_lanes_bit_identical(stride, pad):
    rng = Rng(9)
    x = rng.derive("x", stride, pad).normal((3, 10, 10, 5))
    gcols = rng.derive("g", stride, pad).normal(
        (3, (10 + 2 * pad - 3) // stride + 1, (10 + 2 * pad - 3) // stride + 1, 3, 3, 5)
    )
    a_cols = kernels._impl.im2col(x, 3, 3, stride, pad)
    b_cols = numpy_kernels.im2col(x, 3, 3, stride, pad)
    assert np.array_equal(a_cols, b_cols)
    a_gx = kernels._impl.col2im_add(gcols, x.shape, stride, pad)
    b_gx = numpy_kernels.col2im_add(gcols, x.shape, stride, pad)
    assert np.array_equal(a_gx, b_gx)


def test_backward_input_is_adjoint_of_forward():
    # <conv(x), g> must equal <x, conv_backward_input(g)> for a linear map.
    rng = Rng(2)
    x = rng.derive("x").normal((2, 6, 6, 3))
    w = rng.derive("w").normal((3, 3, 3, 4))
    go = rng.derive("go").normal((2, 6, 6, 4))
    out = kernels.conv2d_forward(x, w, 1, 1)
    gx = kernels.conv2d_backward_input(go, w, x.shape, 1, 1)
    assert np.allclose(np.sum(out * go), np.sum(x * gx), rtol=1e-12)


def test_backward_weight_is_adjoint_in_w():
    rng = Rng(3)
    x = rng.derive("x").normal((2, 6, 6, 3))
    w = rng.derive("w").normal((3, 3, 3, 4))
    go = rng.derive("go").normal((2, 6, 6, 4))
    out = kernels.conv2d_forward(x, w, 1, 1)
    gw = kernels.conv2d_backward_weight(go, x, w.shape, 1, 1)
    assert np.allclose(np.sum(out * go), np.sum(w * gw), rtol=1e-12)
