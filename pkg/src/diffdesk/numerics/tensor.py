"""Dense float64 tensors with reverse-mode differentiation.

The engine is define-by-run: every operator returns a new Tensor that
remembers its parents and a closure applying the chain rule.  Calling
`backward()` on a scalar output topologically sorts the recorded graph and
accumulates gradients into every reachable tensor with `requires_grad`.

Operator set: elementwise add/mul/scale, SiLU, dense affine map, 2-D
convolution (stride 1/2, zero padding), nearest-neighbor 2x upsample,
per-channel normalization with learned scale/shift, channel concatenation,
mean / sum / mean-squared-error reductions, and a sinusoidal time embedding.

Image layout is channels-last: batches are (N, H, W, C) and conv weights
are (kh, kw, Cin, Cout), which keeps the im2col patch matrix in GEMM order.
"""

from __future__ import annotations

import numpy as np

from ..errors import NonScalarOutputError, ShapeError
from . import kernels

# When enabled, every operator output is checked for NaN/Inf.  Costs a few
# percent of runtime; disable for long production runs via set_check_finite.
CHECK_FINITE = True


def set_check_finite(enabled: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = bool(enabled)


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A node in the computation graph: float64 payload plus backward hook."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = _as_f64(data)
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise ShapeError(f"non-finite values in tensor produced by {op!r}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._grad_owned = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    # Pickle support (for worker pools): only the payload travels; graph
    # edges and gradients are process-local state.
    def __getstate__(self):
        return (self.data, self.requires_grad, self.op)

    def __setstate__(self, state):
        self.data, self.requires_grad, self.op = state
        self.grad = None
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    def _accumulate(self, g: np.ndarray) -> None:
        # First store keeps a reference; a second contribution allocates a
        # fresh sum so shared gradient arrays are never mutated in place.
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self) -> None:
        """Reverse sweep from this scalar; visits each reachable node once."""
        if self.data.shape != ():
            raise NonScalarOutputError(
                f"backward requires a scalar output, got shape {self.data.shape} from {self.op!r}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        self._grad_owned = True
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic sugar for scalar/tensor combinations used by the models.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ShapeError(f"non-finite values in tensor produced by {op!r}")
    out.grad = None
    out._grad_owned = False
    out.op = op
    req = any(p.requires_grad for p in parents)
    out.requires_grad = req
    if req:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), "add", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, s: float) -> Tensor:
    def bw(g):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), "scale", bw)


def shift(a: Tensor, s: float) -> Tensor:
    def bw(g):
        a._accumulate(g)

    return _make(a.data + s, (a,), "shift", bw)


def silu(a: Tensor) -> Tensor:
    # Clipping keeps exp() finite; sigmoid saturates well before +-60 anyway.
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))
    out = a.data * sig

    def bw(g):
        a._accumulate(g * (sig + out * (1.0 - sig)))

    return _make(out, (a,), "silu", bw)


def add_channel(x: Tensor, v: Tensor) -> Tensor:
    """Broadcast-add a per-channel vector over the spatial axes.

    v may be (C,) (shared bias) or (N, C) (per-sample bias, e.g. a time
    embedding projection).  x is (N, H, W, C).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"add_channel: expected NHWC input, got {x.data.shape}")
    if v.data.ndim == 1:
        if v.data.shape[0] != x.data.shape[3]:
            raise ShapeError(f"add_channel: bias {v.data.shape} does not match channels {x.data.shape}")
        data = x.data + v.data

        def bw(g):
            if x.requires_grad:
                x._accumulate(g)
            if v.requires_grad:
                v._accumulate(g.sum(axis=(0, 1, 2)))

    elif v.data.ndim == 2:
        if v.data.shape != (x.data.shape[0], x.data.shape[3]):
            raise ShapeError(
                f"add_channel: bias {v.data.shape} does not match batch/channels of {x.data.shape}"
            )
        data = x.data + v.data[:, None, None, :]

        def bw(g):
            if x.requires_grad:
                x._accumulate(g)
            if v.requires_grad:
                v._accumulate(g.sum(axis=(1, 2)))

    else:
        raise ShapeError(f"add_channel: bias must be (C,) or (N, C), got {v.data.shape}")
    return _make(data, (x, v), "add_channel", bw)


# ---------------------------------------------------------------------------
# linear maps


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Dense map: (N, D) @ (D, M) + (M,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine: cannot apply {w.data.shape} weight to {x.data.shape} input")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"affine: bias {b.data.shape} does not match output width {w.data.shape[1]}")
    data = x.data @ w.data + b.data

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(data, (x, w, b), "affine", bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D convolution, NHWC layout, zero padding, stride 1 or 2."""
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and HWIO weight, got {x.data.shape}, {w.data.shape}")
    if x.data.shape[3] != w.data.shape[2]:
        raise ShapeError(
            f"conv2d: input channels {x.data.shape[3]} do not match weight channels {w.data.shape[2]}"
        )
    if b is not None and b.data.shape != (w.data.shape[3],):
        raise ShapeError(f"conv2d: bias {b.data.shape} does not match {w.data.shape[3]} filters")
    data = kernels.conv2d_forward(x.data, w.data, stride, pad)
    if b is not None:
        data += b.data

    def bw(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            x._accumulate(kernels.conv2d_backward_input(g, w.data, x.data.shape, stride, pad))
        if w.requires_grad:
            w._accumulate(kernels.conv2d_backward_weight(g, x.data, w.data.shape, stride, pad))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, "conv2d", bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: expected NHWC input, got {x.data.shape}")
    data = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def bw(g):
        n, h2, w2, c = g.shape
        x._accumulate(g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)))

    return _make(data, (x,), "upsample_nearest2x", bw)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes with learned scale/shift."""
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm: expected NHWC input, got {x.data.shape}")
    c = x.data.shape[3]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"instance_norm: scale/shift must be ({c},), got {gamma.data.shape}, {beta.data.shape}")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data
    m = x.data.shape[1] * x.data.shape[2]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate(np.sum(g * xhat, axis=(0, 1, 2)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            dxhat = g * gamma.data
            s1 = dxhat.sum(axis=(1, 2), keepdims=True)
            s2 = np.sum(dxhat * xhat, axis=(1, 2), keepdims=True)
            x._accumulate(inv * (dxhat - s1 / m - xhat * (s2 / m)))

    return _make(data, (x, gamma, beta), "instance_norm", bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if (
        a.data.ndim != 4
        or b.data.ndim != 4
        or a.data.shape[0] != b.data.shape[0]
        or a.data.shape[1:3] != b.data.shape[1:3]
    ):
        raise ShapeError(f"concat_channels: incompatible shapes {a.data.shape} and {b.data.shape}")
    ca = a.data.shape[3]

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g[..., :ca]))
        if b.requires_grad:
            b._accumulate(np.ascontiguousarray(g[..., ca:]))

    return _make(np.concatenate([a.data, b.data], axis=3), (a, b), "concat_channels", bw)


def scale_per_sample(x: Tensor, s: np.ndarray) -> Tensor:
    """Multiply each sample in the leading axis by its own scalar."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or s.shape[0] != x.data.shape[0]:
        raise ShapeError(f"scale_per_sample: want ({x.data.shape[0]},) factors, got {s.shape}")
    sb = s.reshape((-1,) + (1,) * (x.data.ndim - 1))

    def bw(g):
        x._accumulate(g * sb)

    return _make(x.data * sb, (x,), "scale_per_sample", bw)


# ---------------------------------------------------------------------------
# reductions


def sum_per_sample(a: Tensor) -> Tensor:
    """Sum everything but the leading axis; (N, ...) -> (N,)."""
    n = a.data.shape[0]
    data = a.data.reshape(n, -1).sum(axis=1)

    def bw(g):
        a._accumulate(np.broadcast_to(g.reshape((n,) + (1,) * (a.data.ndim - 1)), a.data.shape))

    return _make(data, (a,), "sum_per_sample", bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(np.full(a.data.shape, float(g)))

    return _make(np.asarray(a.data.sum()), (a,), "sum_all", bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        a._accumulate(np.full(a.data.shape, float(g) / n))

    return _make(np.asarray(a.data.mean()), (a,), "mean_all", bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        base = (2.0 * float(g) / n) * diff
        if a.requires_grad:
            a._accumulate(base)
        if b.requires_grad:
            b._accumulate(-base)

    return _make(np.asarray(np.mean(diff * diff)), (a, b), "mse", bw)


# ---------------------------------------------------------------------------
# embeddings


def time_embedding(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal embedding of (N,) step values into (N, dim) features.

    Frequencies follow the usual geometric ladder from 1 down to 1/10000.
    Differentiable in t so the whole operator set is finite-difference
    checkable, although pipelines only ever feed integer step values.
    """
    if dim % 2 != 0:
        raise ShapeError(f"time_embedding: dim must be even, got {dim}")
    if t.data.ndim != 1:
        raise ShapeError(f"time_embedding: expected (N,) steps, got {t.data.shape}")
    half = dim // 2
    if half > 1:
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    ang = t.data[:, None] * freqs[None, :]
    data = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def bw(g):
        half_g = g[:, :half] * np.cos(ang) - g[:, half:] * np.sin(ang)
        t._accumulate((half_g * freqs[None, :]).sum(axis=1))

    return _make(data, (t,), "time_embedding", bw)
