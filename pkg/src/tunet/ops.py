"""Differentiable kernels on :class:`~tunet.tensor.Tensor`.

Spatial kernels take channel-first volumes, either a single instance
``[C, D, H, W]`` or a batch ``[N, C, D, H, W]``; the batch axis is carried
through unchanged and every statistic is computed per instance.
"""

from __future__ import annotations

import functools

import numpy as np
from scipy.special import expit

from . import _kernels
from .errors import DimensionError, NonFiniteError
from .tensor import Tensor, _get, _note_branch, as_tensor, make_node

_SPATIAL_AXES = ("depth", "height", "width")


def _check_finite(t: Tensor) -> Tensor:
    if _get("debug", False) and not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite output from {t.op}", name=t.op)
    return t


def _single_instance(fn):
    """Let a batched spatial kernel accept an unbatched ``[C, D, H, W]`` input."""

    @functools.wraps(fn)
    def wrapper(x, *args, **kwargs):
        x = as_tensor(x)
        if x.ndim == 4:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 5:
            raise DimensionError(f"{fn.__name__} expects a [C,D,H,W] or [N,C,D,H,W] tensor, got shape {x.shape}",
                                 axis="rank")
        return fn(x, *args, **kwargs)

    return wrapper


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise and structural ops ------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _check_finite(make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _check_finite(make_node(a.data * b.data, (a, b), backward, "mul"))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_node(-x.data, (x,), lambda g: (-g,), "neg")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _note_branch(mask)
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data).astype(x.dtype)
    return make_node(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def concat_channels(*xs) -> Tensor:
    """Stack tensors along the channel axis (axis 0 unbatched, axis 1 batched)."""
    xs = [as_tensor(x) for x in xs]
    ndim = xs[0].ndim
    if ndim not in (4, 5) or any(x.ndim != ndim for x in xs):
        raise DimensionError("concat_channels needs tensors of equal rank 4 or 5", axis="rank")
    axis = ndim - 4
    ref = xs[0].shape
    for x in xs[1:]:
        for i, (s, r) in enumerate(zip(x.shape, ref)):
            if i != axis and s != r:
                name = "batch" if (ndim == 5 and i == 0) else _SPATIAL_AXES[i - axis - 1]
                raise DimensionError(f"concat_channels shape mismatch {x.shape} vs {ref}", axis=name)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_node(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


# fully connected / channel gating --------------------------------------------------

def fully_connected(x, weight, bias=None) -> Tensor:
    """``x @ W.T + b`` for ``x`` of shape ``[n]`` or ``[N, n]`` and ``W`` of shape ``[m, n]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}",
                             axis="features")
    parents = [x, weight]
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"fully_connected: bias {bias.shape} vs {weight.shape[0]} outputs", axis="features")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        grads = [(g @ weight.data).reshape(x.shape), g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _check_finite(make_node(out, parents, backward, "fc"))


@_single_instance
def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``[N, C, D, H, W] -> [N, C]``."""
    n_vox = int(np.prod(x.shape[2:]))
    shape = x.shape

    def backward(g):
        return (np.broadcast_to((g / n_vox)[:, :, None, None, None], shape).copy(),)

    return make_node(x.data.mean(axis=(2, 3, 4)), (x,), backward, "gap")


def scale_channels(x, s) -> Tensor:
    """Multiply channel ``c`` of ``x`` by ``s[c]`` (``s`` is ``[C]`` or ``[N, C]``)."""
    x, s = as_tensor(x), as_tensor(s)
    if s.shape != x.shape[: x.ndim - 3]:
        raise DimensionError(f"scale_channels: scale {s.shape} does not match channels of {x.shape}", axis="channels")
    sb = s.data.reshape(s.shape + (1, 1, 1))

    def backward(g):
        return g * sb, (g * x.data).sum(axis=(-3, -2, -1))

    return make_node(x.data * sb, (x, s), backward, "scale")


# convolution -----------------------------------------------------------------------

def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    width = ((0, 0), (0, 0), (p, p), (p, p), (p, p))
    return np.pad(x, width, mode="edge" if mode == "replicate" else "constant")


def _unpad(gp: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return gp
    if mode == "replicate":
        gp = gp.copy()
        for axis in (2, 3, 4):
            lo = [slice(None)] * 5
            hi = [slice(None)] * 5
            lo[axis], hi[axis] = slice(p, p + 1), slice(-p - 1, -p)
            head = [slice(None)] * 5
            tail = [slice(None)] * 5
            head[axis], tail[axis] = slice(0, p), slice(-p, None)
            gp[tuple(lo)] += gp[tuple(head)].sum(axis=axis, keepdims=True)
            gp[tuple(hi)] += gp[tuple(tail)].sum(axis=axis, keepdims=True)
    return np.ascontiguousarray(gp[:, :, p:-p, p:-p, p:-p])


@_single_instance
def conv3d(x: Tensor, weight, bias=None, padding: str = "same") -> Tensor:
    """3D cross-correlation with a cubic odd-sized kernel.

    Args:
        x: ``[N, Cin, D, H, W]`` (or unbatched) input.
        weight: ``[Cout, Cin, k, k, k]`` kernel.
        bias: optional ``[Cout]`` vector.
        padding: ``"same"`` (zero padding, shape preserving), ``"replicate"``
            (edge padding, shape preserving) or ``"valid"``.
    """
    weight = as_tensor(weight)
    if weight.ndim != 5:
        raise DimensionError(f"conv3d kernel must be [Cout,Cin,k,k,k], got {weight.shape}", axis="rank")
    k = weight.shape[2]
    if weight.shape[3] != k or weight.shape[4] != k or k % 2 == 0:
        raise DimensionError(f"conv3d kernel must be cubic with odd size, got {weight.shape[2:]}", axis="kernel")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv3d: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}",
                             axis="channels")
    if padding not in ("same", "valid", "replicate"):
        raise ValueError(f"unknown padding {padding!r}")
    p = 0 if padding == "valid" else k // 2
    if p == 0:
        for name, s in zip(_SPATIAL_AXES, x.shape[2:]):
            if s < k:
                raise DimensionError(f"conv3d valid padding needs spatial size >= {k}, got {s}", axis=name)

    dtype = x.dtype
    wd = weight.data.astype(dtype, copy=False)
    xp = _pad(x.data, p, padding)
    out_shape = (x.shape[0], weight.shape[0]) + tuple(s - k + 1 for s in xp.shape[2:])
    out = np.zeros(out_shape, dtype=dtype)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"conv3d bias must be [{weight.shape[0]}], got {bias.shape}", axis="channels")
        out += bias.data.astype(dtype).reshape(1, -1, 1, 1, 1)
        parents.append(bias)
    _kernels.conv3d_forward(xp, wd, out)

    def backward(g):
        g = np.ascontiguousarray(g)
        dx = None
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            _kernels.conv3d_input_grad(g, wd, dxp)
            dx = _unpad(dxp, p, padding)
        dw = _kernels.conv3d_weight_grad(xp, g, np.zeros_like(wd)) if weight.requires_grad else None
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return _check_finite(make_node(out, parents, backward, "conv3d"))


# normalization -----------------------------------------------------------------------

@_single_instance
def instance_norm(x: Tensor, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-instance, per-channel standardization followed by an affine map.

    Statistics are accumulated relative to the first voxel of each channel, so a
    spatially constant channel centers to exactly zero and maps to ``beta``.
    """
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    N, C = x.shape[:2]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"instance_norm: gamma/beta must be [{C}]", axis="channels")
    n_vox = int(np.prod(x.shape[2:]))
    if n_vox < 2:
        raise DimensionError("instance_norm needs at least two voxels per channel", axis="spatial")
    flat = x.data.reshape(N, C, n_vox)
    shifted = flat - flat[:, :, :1]
    centered = shifted - shifted.mean(axis=2, keepdims=True)
    var = np.mean(centered * centered, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    g = gamma.data.reshape(1, C, 1).astype(x.dtype)
    out = (xhat * g + beta.data.reshape(1, C, 1)).astype(x.dtype)

    def backward(dy):
        dy = dy.reshape(N, C, n_vox)
        dxhat = dy * g
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=2, keepdims=True))
        return (dx.reshape(x.shape), (dy * xhat).sum(axis=(0, 2)), dy.sum(axis=(0, 2)))

    return _check_finite(make_node(out.reshape(x.shape), (x, gamma, beta), backward, "instance_norm"))


# resampling -------------------------------------------------------------------------

def _check_divisible(shape, factor, op):
    for name, s in zip(_SPATIAL_AXES, shape[2:]):
        if s % factor:
            raise DimensionError(f"{op}: spatial size {s} is not divisible by {factor}", axis=name)


@_single_instance
def maxpool3d(x: Tensor) -> Tensor:
    """2x2x2 max pooling with stride 2.

    The gradient goes to the first maximum of each window in row-major order,
    i.e. the lowest linear index among tied maxima.
    """
    _check_divisible(x.shape, 2, "maxpool3d")
    N, C, D, H, W = x.shape
    blocks = (x.data.reshape(N, C, D // 2, 2, H // 2, 2, W // 2, 2)
              .transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(N, C, D // 2, H // 2, W // 2, 8))
    idx = blocks.argmax(axis=-1)
    _note_branch(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        dx = (onehot.reshape(N, C, D // 2, H // 2, W // 2, 2, 2, 2)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(x.shape))
        return (dx,)

    return make_node(np.ascontiguousarray(out), (x,), backward, "maxpool3d")


@_single_instance
def upsample3d_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate each voxel into a ``factor**3`` block."""
    N, C, D, H, W = x.shape
    f = factor
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None],
                          (N, C, D, f, H, f, W, f)).reshape(N, C, D * f, H * f, W * f)

    def backward(g):
        return (g.reshape(N, C, D, f, H, f, W, f).sum(axis=(3, 5, 7)),)

    return make_node(np.ascontiguousarray(out), (x,), backward, "upsample")


@_single_instance
def downsample_avg(x: Tensor, factor: int) -> Tensor:
    """Block-mean pooling by ``factor`` (a power of two) along every spatial axis."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"downsample factor must be a power of two, got {factor}")
    if factor == 1:
        return x
    _check_divisible(x.shape, factor, "downsample_avg")
    N, C, D, H, W = x.shape
    f = factor
    out = x.data.reshape(N, C, D // f, f, H // f, f, W // f, f).mean(axis=(3, 5, 7))

    def backward(g):
        g = (g / f ** 3)[:, :, :, None, :, None, :, None]
        return (np.broadcast_to(g, (N, C, D // f, f, H // f, f, W // f, f)).reshape(x.shape).copy(),)

    return make_node(out.astype(x.dtype), (x,), backward, "downsample")


# operator sugar used by losses and tests
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.sum = lambda self: sum_all(self)
