"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients. Image tensors are NCHW.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import kernels
from .core import (
    ConfigurationError,
    DimensionError,
    StateError,
    Tensor,
    make_output,
)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad + bd
    return make_output(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad - bd
    return make_output(out, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)))


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad * bd
    return make_output(
        out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_output(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_output(np.log(xd), (x,), lambda g: (g / xd,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make_output(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    return make_output(np.where(pos, xd, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    """x for x >= 0, alpha*x otherwise. At exactly 0 the backward slope is alpha."""
    xd = x.data
    slope = np.where(xd > 0, 1.0, alpha)
    out = np.where(xd >= 0, xd, alpha * xd)
    return make_output(out, (x,), lambda g: (g * slope,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_output(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xd = x.data
    out = np.sum(xd, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return make_output(np.asarray(out, dtype=np.float64), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    if axis is None:
        count = xd.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([xd.shape[a] for a in axes]))
    s = sum(x, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    xd = x.data
    return make_output(xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    arrs = [t.data for t in tensors]
    out = np.concatenate(arrs, axis=axis)
    bounds = np.cumsum([0] + [a.shape[axis] for a in arrs])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(arrs))
        )

    return make_output(out, tuple(tensors), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_output(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    xd = x.data
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))
    return make_output(
        out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), xd.shape).copy(),)
    )


# ---------------------------------------------------------------- dense layers


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise DimensionError(
            f"linear: input features (axis 1 of {xd.shape}) must match weight in_features "
            f"(axis 1 of {wd.shape})"
        )
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gb = g.sum(axis=0) if bias is not None else None
        return (g @ wd, g.T @ xd, gb)

    return make_output(out, (x, weight, bias), bw)


def _check_nchw(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name}: expected NCHW input, got shape {x.shape}")


def _same_pads(size: int, k: int, stride: int) -> tuple:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding=0
) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``padding`` is a non-negative int (symmetric zero padding) or ``"same"``,
    which pads asymmetrically (extra row/column at the bottom/right) so the
    output size is ceil(input / stride).
    """
    xd, wd = x.data, weight.data
    _check_nchw("conv2d", xd)
    if wd.ndim != 4:
        raise DimensionError(f"conv2d: weight must be (out_c, in_c, kh, kw), got {wd.shape}")
    n, c, h, w = xd.shape
    oc, ic, kh, kw = wd.shape
    if c != ic:
        raise DimensionError(f"conv2d: input channels (axis 1) = {c} but weight in_c (axis 1) = {ic}")
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride {stride} must be positive")
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif isinstance(padding, (int, np.integer)) and padding >= 0:
        pt = pb = pl = pr = int(padding)
    else:
        raise ConfigurationError(f"conv2d: padding {padding!r} must be a non-negative int or 'same'")
    hp, wp = h + pt + pb, w + pl + pr
    if (hp - kh) % stride or (wp - kw) % stride or hp < kh or wp < kw:
        raise ConfigurationError(
            f"conv2d: output size ({hp}-{kh})/{stride}+1 x ({wp}-{kw})/{stride}+1 is not a positive integer"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    padded = pt or pb or pl or pr
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if padded else xd
    xp = np.ascontiguousarray(xp)
    cols = kernels.im2col(xp, kh, kw, stride)  # (N, K, P)
    w2 = wd.reshape(oc, -1)
    out = np.matmul(w2, cols)  # (N, O, P)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, oc, ho, wo)

    def bw(g):
        g3 = g.reshape(n, oc, ho * wo)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.ascontiguousarray(np.matmul(w2.T, g3))
            gxp = kernels.col2im(gcols, n, c, hp, wp, kh, kw, stride)
            gx = gxp[:, :, pt : pt + h, pl : pl + w] if padded else gxp
        return (gx, gw, gb)

    return make_output(out, (x, weight, bias), bw)


def conv2d_transpose(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2
) -> Tensor:
    """Transposed convolution with kernel size equal to stride (non-overlapping scatter).

    ``weight`` has shape (in_c, out_c, k, k).
    """
    xd, wd = x.data, weight.data
    _check_nchw("conv2d_transpose", xd)
    if wd.ndim != 4:
        raise DimensionError(f"conv2d_transpose: weight must be (in_c, out_c, k, k), got {wd.shape}")
    n, c, h, w = xd.shape
    ic, oc, kh, kw = wd.shape
    if c != ic:
        raise DimensionError(f"conv2d_transpose: input channels (axis 1) = {c} but weight in_c (axis 0) = {ic}")
    if kh != stride or kw != stride:
        raise ConfigurationError(f"conv2d_transpose: kernel {kh}x{kw} must equal stride {stride}")
    s = stride
    # out[n, o, s*i+a, s*j+b] = sum_c x[n,c,i,j] * w[c,o,a,b]
    y = np.tensordot(xd, wd, axes=([1], [0]))  # (N, H, W, O, s, s)
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5)).reshape(n, oc, h * s, w * s)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        g6 = g.reshape(n, oc, h, s, w, s)  # (N, O, H, a, W, b)
        gx = np.einsum("nohawb,coab->nchw", g6, wd, optimize=True)
        gw = np.einsum("nohawb,nchw->coab", g6, xd, optimize=True)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb)

    return make_output(out, (x, weight, bias), bw)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """2x2 / stride-2 max pooling; gradient goes to the first maximal entry in row-major order."""
    xd = x.data
    _check_nchw("maxpool2d", xd)
    if window != 2:
        raise ConfigurationError(f"maxpool2d: only window 2 is supported, got {window}")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d: spatial dims must be even, got H={h}, W={w}")
    out, arg = kernels.maxpool2_forward(np.ascontiguousarray(xd))
    return make_output(
        out, (x,), lambda g: (kernels.maxpool2_backward(np.ascontiguousarray(g), arg),)
    )


# ---------------------------------------------------------------- normalization


def _norm_backward(gxhat: np.ndarray, xhat: np.ndarray, invstd: np.ndarray, axes) -> np.ndarray:
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return invstd * (gxhat - m1 - xhat * m2)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Per-(sample, channel) plane normalization with per-channel affine."""
    xd = x.data
    _check_nchw("instance_norm", xd)
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"instance_norm: gamma/beta must have shape ({c},)")
    axes = (2, 3)
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * invstd
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def bw(g):
        gx = _norm_backward(g * gd, xhat, invstd, axes)
        return (gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return make_output(out, (x, gamma, beta), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalize over all non-batch axes; gamma/beta have shape x.shape[1:]."""
    xd = x.data
    if gamma.shape != xd.shape[1:] or beta.shape != xd.shape[1:]:
        raise DimensionError(f"layer_norm: gamma/beta must have shape {xd.shape[1:]}")
    axes = tuple(range(1, xd.ndim))
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * invstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = _norm_backward(g * gamma.data, xhat, invstd, axes)
        return (gx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return make_output(out, (x, gamma, beta), bw)


class RunningStats:
    """Mutable running mean/variance for batch norm. Unpopulated until the first training call."""

    def __init__(self, channels: int):
        self.channels = channels
        self.mean: Optional[np.ndarray] = None
        self.var: Optional[np.ndarray] = None

    @property
    def populated(self) -> bool:
        return self.mean is not None


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
    training: bool = True,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Training mode uses batch statistics and folds them into ``stats`` with
    ``running = (1 - momentum) * running + momentum * batch``; the first
    update copies the batch statistics. Variances are population variances.
    """
    xd = x.data
    _check_nchw("batch_norm", xd)
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({c},)")
    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError(f"batch_norm: momentum {momentum} outside [0, 1]")
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    if not training:
        if not stats.populated:
            raise StateError("batch_norm: inference mode requires populated running statistics")
        invstd = 1.0 / np.sqrt(stats.var + epsilon)[None, :, None, None]
        xhat = (xd - stats.mean[None, :, None, None]) * invstd
        out = xhat * gd + bd

        def bw_eval(g):
            return (g * gd * invstd, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return make_output(out, (x, gamma, beta), bw_eval)

    axes = (0, 2, 3)
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * invstd
    out = xhat * gd + bd
    bm, bv = mu.reshape(c), var.reshape(c)
    if stats.populated:
        stats.mean = (1.0 - momentum) * stats.mean + momentum * bm
        stats.var = (1.0 - momentum) * stats.var + momentum * bv
    else:
        stats.mean, stats.var = bm.copy(), bv.copy()

    def bw(g):
        gx = _norm_backward(g * gd, xhat, invstd, axes)
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return make_output(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- losses used by training


def smooth_l1(a: Tensor, b) -> Tensor:
    """Mean over all elements of 0.5*d^2 (|d| < 1) or |d| - 0.5, with d = a - b."""
    ad, bd = _data(a), _data(b)
    if ad.shape != bd.shape:
        raise DimensionError(f"smooth_l1: shapes differ {ad.shape} vs {bd.shape}")
    d = ad - bd
    small = np.abs(d) < 1.0
    out = np.where(small, 0.5 * d * d, np.abs(d) - 0.5).mean()
    grad = np.where(small, d, np.sign(d)) / d.size

    def bw(g):
        ga = g * grad
        return (ga, -ga)

    return make_output(np.asarray(out), (a, b), bw)
