"""Minimal dense-tensor engine with reverse-mode differentiation.

Only the operations the forecaster needs are provided.  Spatial operations
work on ``[C, H, W]`` or batched ``[B, C, H, W]`` arrays; elementwise
operations require equal shapes (no broadcasting).  Arrays keep the dtype
they were created with, so the same graph can run in float32 (training) or
float64 (finite-difference oracles).

Every node gets a creation index from a global counter.  Creation order is a
topological order of the tape, so :func:`backward` simply walks the reachable
nodes in decreasing index.
"""

from __future__ import annotations

import itertools
from collections.abc import Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError
from .rng import Stream

_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_counter)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every ``requires_grad`` tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    for node in nodes.values():
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for key in sorted(nodes, reverse=True):
        node = nodes[key]
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # intermediate gradients are not needed once propagated
            node.grad = None if node._parents else node.grad


# elementwise -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, "sub", (a, b), bw)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "multiply")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, "multiply", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, "scale", (a,), lambda g: _accum(a, g * c))


def abs_subtract(a: Tensor, b: Tensor) -> Tensor:
    """``|a - b|`` with subgradient 0 at ties."""
    _same_shape(a, b, "abs_subtract")
    diff = a.data - b.data
    sign = np.sign(diff)

    def bw(g):
        _accum(a, g * sign)
        _accum(b, -g * sign)

    return _make(np.abs(diff), "abs_subtract", (a, b), bw)


def silu(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x.data))
    sig = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.data.dtype, copy=False)

    def bw(g):
        _accum(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _make(x.data * sig, "silu", (x,), bw)


# reductions and shape ops ----------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def sum_over_axes(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    shape = x.shape

    def bw(g):
        _accum(x, np.broadcast_to(np.expand_dims(g, axes), shape))

    return _make(np.asarray(x.data.sum(axis=axes)), "sum", (x,), bw)


def mean_over_axes(x: Tensor, axes=None) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    shape = x.shape
    count = int(np.prod([shape[a] for a in axes]))
    inv = x.data.dtype.type(1.0 / count)

    def bw(g):
        _accum(x, np.broadcast_to(np.expand_dims(g * inv, axes), shape))

    return _make(np.asarray(x.data.mean(axis=axes)), "mean", (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: _accum(x, g.reshape(old)))


def index(x: Tensor, i: int, axis: int = 0) -> Tensor:
    """Select entry ``i`` along ``axis`` (the axis is dropped)."""
    axis %= x.ndim
    sl = (slice(None),) * axis + (i,)

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(x, full)

    return _make(x.data[sl].copy(), "index", (x,), bw)


def crop(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window over the last two axes."""
    if top < 0 or left < 0 or top + height > x.shape[-2] or left + width > x.shape[-1]:
        raise DimensionError(f"crop window outside tensor of shape {x.shape}")
    sl = (..., slice(top, top + height), slice(left, left + width))

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(x, full)

    return _make(x.data[sl].copy(), "crop", (x,), bw)


def embed(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Place ``x`` into a zero frame of spatial size ``height x width`` (inverse of :func:`crop`)."""
    h, w = x.shape[-2:]
    if top < 0 or left < 0 or top + h > height or left + w > width:
        raise DimensionError(f"cannot embed {x.shape} at ({top}, {left}) in {height}x{width}")
    sl = (..., slice(top, top + h), slice(left, left + w))
    full = np.zeros(x.shape[:-2] + (height, width), dtype=x.data.dtype)
    full[sl] = x.data
    return _make(full, "embed", (x,), lambda g: _accum(x, g[sl]))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (``-3``)."""
    if not parts:
        raise DimensionError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:-3] != ref[:-3] or p.shape[-2:] != ref[-2:]:
            raise DimensionError(f"concat_channels: incompatible shapes {ref} and {p.shape}")
    sizes = [p.shape[-3] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[..., lo:hi, :, :])

    data = np.concatenate([p.data for p in parts], axis=-3)
    return _make(data, "concat_channels", tuple(parts), bw)


def nearest_upsample2x(x: Tensor) -> Tensor:
    data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        h, w = x.shape[-2:]
        blocks = g.reshape(g.shape[:-2] + (h, 2, w, 2))
        _accum(x, blocks.sum(axis=(-3, -1)))

    return _make(data, "nearest_upsample2x", (x,), bw)


def average_pool2x(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"average_pool2x needs even spatial size, got {h}x{w}")
    blocks = x.data.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2))
    quarter = x.data.dtype.type(0.25)

    def bw(g):
        _accum(x, (g * quarter).repeat(2, axis=-2).repeat(2, axis=-1))

    return _make(blocks.mean(axis=(-3, -1)), "average_pool2x", (x,), bw)


# affine maps -----------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``.

    Each row is multiplied on its own (a stack of 1-row products) so a
    batched call is bitwise equal to separate calls.
    """
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in or bias.shape != (d_out,):
        raise DimensionError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    rows = x.data[..., None, :]
    out = np.matmul(rows, weight.data.T)[..., 0, :] + bias.data

    def bw(g):
        _accum(x, np.matmul(g[..., None, :], weight.data)[..., 0, :])
        g2 = g.reshape(-1, d_out)
        _accum(weight, g2.T @ x.data.reshape(-1, d_in))
        _accum(bias, g2.sum(axis=0))

    return _make(out, "linear", (x, weight, bias), bw)


def _as4d(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 3 else x


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same", stride: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding. ``x`` is ``[C,H,W]`` or ``[B,C,H,W]``."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    c_out, c_in, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {kernel.shape}")
    if x.shape[-3] != c_in:
        raise DimensionError(f"conv2d: input has {x.shape[-3]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape}, expected ({c_out},)")
    if stride not in (1, 2):
        raise DimensionError("conv2d stride must be 1 or 2")
    if padding == "same":
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise DimensionError(f"unknown padding {padding!r}")
    squeeze = x.ndim == 3
    xd = _as4d(x.data)
    b, _, h, w = xd.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise DimensionError(f"conv2d: input {h}x{w} smaller than kernel {k}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    if k == 1:
        cols = xp[:, :, ::stride, ::stride].reshape(b, c_in, ho * wo)
    else:
        cols6 = np.empty((b, c_in, k, k, ho, wo), dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                cols6[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols6.reshape(b, c_in * k * k, ho * wo)
    w2d = kernel.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2d, cols) + bias.data[:, None]
    out = out.reshape(b, c_out, ho, wo)
    if squeeze:
        out = out[0]

    def bw(g):
        g3 = _as4d(g).reshape(b, c_out, ho * wo)
        gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
        _accum(kernel, gk.reshape(kernel.shape))
        _accum(bias, g3.sum(axis=(0, 2)))
        if not x.requires_grad:
            return
        dcols = np.matmul(w2d.T, g3).reshape(b, c_in, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        _accum(x, dx[0] if squeeze else dx)

    return _make(out, "conv2d", (x, kernel, bias), bw)


def cond_layer_norm(x: Tensor, scale: Tensor, shift: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalise each position's channel vector, then ``xhat * (1 + scale) + shift``.

    ``x`` is ``[C,H,W]`` with ``scale``/``shift`` of shape ``[C]``, or
    ``[B,C,H,W]`` with ``[B,C]`` conditioning.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if x.ndim not in (3, 4):
        raise DimensionError(f"cond_layer_norm input must be 3-D or 4-D, got {x.shape}")
    expect = x.shape[:-2] if x.ndim == 4 else x.shape[:1]
    if scale.shape != expect or shift.shape != expect:
        raise DimensionError(
            f"cond_layer_norm: scale {scale.shape} / shift {shift.shape} do not match {expect}"
        )
    xd = x.data
    mu = xd.mean(axis=-3, keepdims=True)
    centred = xd - mu
    var = (centred * centred).mean(axis=-3, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(epsilon))
    xhat = centred * inv
    s = (1.0 + scale.data)[..., None, None]
    out = xhat * s + shift.data[..., None, None]

    def bw(g):
        _accum(shift, g.sum(axis=(-2, -1)))
        _accum(scale, (g * xhat).sum(axis=(-2, -1)))
        if not x.requires_grad:
            return
        gx = g * s
        m1 = gx.mean(axis=-3, keepdims=True)
        m2 = (gx * xhat).mean(axis=-3, keepdims=True)
        _accum(x, inv * (gx - m1 - xhat * m2))

    return _make(out.astype(xd.dtype, copy=False), "cond_layer_norm", (x, scale, shift), bw)


# constructors ----------------------------------------------------------------


def gaussian_sample(shape: Sequence[int], stream: Stream, dtype=np.float32) -> Tensor:
    n = int(np.prod(shape))
    return Tensor(stream.normal(n).reshape(tuple(shape)).astype(dtype), dtype=dtype)


def zeros(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), dtype=dtype)
