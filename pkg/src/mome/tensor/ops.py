"""Differentiable operations over :class:`Tensor`.

Shapes are explicit: apart from adding a per-channel bias inside ``conv3d``
and scaling by a python scalar, operands must agree exactly.
Volumes are laid out channel-first without a batch axis, ``[C, D, H, W]``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .core import Tensor, as_tensor, make_op

_AXES = ("channel", "depth", "height", "width")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for i, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise DimensionError(f"{op}: axis {i} mismatch ({x} vs {y}); shapes {a.shape} and {b.shape}")
        raise DimensionError(f"{op}: rank mismatch, shapes {a.shape} and {b.shape}")


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for a rank-{ndim} tensor")
    return axis % ndim


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            _same_shape(a, Tensor(c), "add")
        return make_op(a.data + c, (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b, a)) if isinstance(b, Tensor) else -np.asarray(b))


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a python scalar or a
    same-shape constant array (no gradient flows into constants)."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            _same_shape(a, Tensor(c), "mul")
        return make_op(a.data * c, (a,), lambda g: (g * c,))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, s) -> Tensor:
    if isinstance(s, Tensor):
        if s.size != 1:
            raise DimensionError("div: divisor must be a scalar tensor")
        sd = s.data.reshape(())
        out = a.data / sd

        def back(g):
            return g / sd, np.asarray(-(g * a.data).sum() / (sd * sd)).reshape(s.shape)

        return make_op(out, (a, s), back)
    s = float(s)
    return make_op(a.data / np.asarray(s, a.dtype), (a,), lambda g: (g / np.asarray(s, a.dtype),))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_op(y, (a,), lambda g: (g * y,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return make_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    scale = np.where(x > 0, np.asarray(1.0, x.dtype), np.asarray(slope, x.dtype))
    return make_op(x * scale, (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        shape = a.shape
        return make_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = _check_axis(axis, a.ndim, "sum")
    shape = a.shape
    return make_op(a.data.sum(axis=axis), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a: Tensor) -> Tensor:
    return div(sum(a), a.size)


# ---------------------------------------------------------------- structural

def index(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_op(np.array(a.data[idx]), (a,), back)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    ndim = tensors[0].ndim
    axis = _check_axis(axis, ndim, "concat")
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise DimensionError(f"concat: rank mismatch ({t.ndim} vs {ndim})")
        for i in range(ndim):
            if i != axis and t.shape[i] != tensors[0].shape[i]:
                raise DimensionError(
                    f"concat: axis {i} mismatch ({t.shape[i]} vs {tensors[0].shape[i]})")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------- normalisation

def softmax(a: Tensor, axis: int = 0) -> Tensor:
    axis = _check_axis(axis, a.ndim, "softmax")
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (a,), back)


def instance_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each channel of a ``[C, ...]`` tensor to zero mean, unit variance."""
    if a.ndim < 2:
        raise DimensionError("instance_norm: expected a [C, ...] tensor")
    c = a.shape[0]
    x = a.data.reshape(c, -1)
    n = x.shape[1]
    if n < 2:
        raise DimensionError("instance_norm: need more than one voxel per channel")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, x.dtype))
    y = xc * inv
    shape = a.shape

    def back(g):
        g = g.reshape(c, -1)
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return ((inv * (g - gm - y * gym)).reshape(shape),)

    return make_op(y.reshape(shape), (a,), back)


# ---------------------------------------------------------------- 3-D spatial ops

def _check_volume(a: Tensor, op: str) -> None:
    if a.ndim != 4:
        raise DimensionError(f"{op}: expected [C, D, H, W] input, got rank {a.ndim}")
    for i, n in enumerate(a.shape):
        if n <= 0:
            raise DimensionError(f"{op}: non-positive {_AXES[i]} dimension {n}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p))) if p else x


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """``[C, D, H, W]`` (already padded) -> ``[C*k^3, D'*H'*W']`` patch matrix."""
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    if stride > 1:
        win = win[:, ::stride, ::stride, ::stride]
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(xp.shape[0] * k ** 3, -1)


def _col2im(gcols: np.ndarray, cin: int, k: int, s: int, pad: int, dims, out_dims) -> np.ndarray:
    gcols = gcols.reshape((cin, k, k, k) + tuple(out_dims))
    gxp = np.zeros((cin,) + tuple(n + 2 * pad for n in dims), dtype=gcols.dtype)
    od, oh, ow = out_dims
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gxp[:, i:i + s * od:s, j:j + s * oh:s, l:l + s * ow:s] += gcols[:, i, j, l]
    return gxp[:, pad:pad + dims[0], pad:pad + dims[1], pad:pad + dims[2]]


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """3-D cross-correlation of ``x [C_in,D,H,W]`` with ``w [C_out,C_in,k,k,k]``.

    Implemented as im2col followed by one matrix product.
    """
    _check_volume(x, "conv3d")
    if w.ndim != 5:
        raise DimensionError(f"conv3d: weight must be [C_out, C_in, k, k, k], got rank {w.ndim}")
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise DimensionError(f"conv3d: kernel must be cubic with odd size, got {w.shape[2:]}")
    if cin != x.shape[0]:
        raise DimensionError(f"conv3d: channel axis mismatch, input has {x.shape[0]} channels, weight expects {cin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv3d: bias shape {b.shape} does not match {cout} output channels")
    if stride not in (1, 2):
        raise DimensionError(f"conv3d: stride must be 1 or 2, got {stride}")
    pad = (k - 1) // 2 if padding is None else padding
    if pad != (k - 1) // 2:
        raise DimensionError(f"conv3d: padding must be (k-1)/2 = {(k - 1) // 2}, got {pad}")

    xd = x.data
    dims = xd.shape[1:]
    out_dims = tuple((n + 2 * pad - k) // stride + 1 for n in dims)
    for ax, n in zip(_AXES[1:], out_dims):
        if n <= 0:
            raise DimensionError(f"conv3d: {ax} too small for kernel {k}")
    wm = w.data.reshape(cout, -1)
    npos = int(np.prod(out_dims))
    pointwise = k == 1 and stride == 1
    cols = xd.reshape(cin, -1) if pointwise else _im2col(_pad(xd, pad), k, stride)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape((cout,) + out_dims)

    def back(g):
        gm = g.reshape(cout, npos)
        gw = (gm @ cols.T).reshape(w.shape)
        gb = gm.sum(axis=1) if b is not None else None
        gx = None
        if x.requires_grad:
            if pointwise:
                gx = (wm.T @ gm).reshape(xd.shape)
            elif stride == 1:
                # full correlation of the output gradient with the flipped kernel
                wf = w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4).reshape(cin, -1)
                gx = (wf @ _im2col(_pad(g, k - 1 - pad), k, 1)).reshape(xd.shape)
            else:
                gx = _col2im(wm.T @ gm, cin, k, stride, pad, dims, out_dims)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return make_op(out, inputs, back)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of every spatial axis by ``factor``."""
    _check_volume(x, "upsample_nearest")
    if factor != 2:
        raise DimensionError(f"upsample_nearest: only factor 2 is supported, got {factor}")
    c, d, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :, None],
                          (c, d, 2, h, 2, w, 2)).reshape(c, 2 * d, 2 * h, 2 * w)

    def back(g):
        return (g.reshape(c, d, 2, h, 2, w, 2).sum(axis=(2, 4, 6)),)

    return make_op(np.ascontiguousarray(out), (x,), back)


def avg_pool3d(x: Tensor, size: int = 2) -> Tensor:
    _check_volume(x, "avg_pool3d")
    if size != 2:
        raise DimensionError(f"avg_pool3d: only window 2 is supported, got {size}")
    c, d, h, w = x.shape
    for ax, n in zip(_AXES[1:], (d, h, w)):
        if n % 2:
            raise DimensionError(f"avg_pool3d: {ax} dimension {n} is not divisible by 2")
    out = x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(2, 4, 6))

    def back(g):
        g8 = g / np.asarray(8, g.dtype)
        return (np.ascontiguousarray(np.broadcast_to(
            g8[:, :, None, :, None, :, None], (c, d // 2, 2, h // 2, 2, w // 2, 2)
        ).reshape(c, d, h, w)),)

    return make_op(out, (x,), back)
