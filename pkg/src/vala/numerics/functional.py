"""Differentiable primitives used by the network.

Feature maps are ``N x C x H x W``; single samples (``C x H x W``) are accepted
by the spatial ops and returned without the batch axis.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, add, as_tensor, log_kink, mul

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")
    return x, False


def _unbatched(x: Tensor, squeeze: bool) -> Tensor:
    return x.reshape(x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# convolution / linear
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` with ``weight`` (``O x C x kh x kw``)."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc} (weight shape {weight.shape})")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    wmat = weight.data.reshape(o, -1)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        out = np.einsum("oc,nchw->nohw", wmat, xs, optimize=True)
        if bias is not None:
            out += bias.data.reshape(1, o, 1, 1)

        def backward(g):
            gw = np.einsum("nohw,nchw->oc", g, xs, optimize=True).reshape(weight.shape)
            gxs = np.einsum("oc,nohw->nchw", wmat, g, optimize=True)
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = gxs
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return gx, gw, gb

    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        # rows: (c, kh, kw); cols: (n, ho, wo), which keeps the gather row-contiguous
        cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
        out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
        if bias is not None:
            out = out + bias.data.reshape(1, o, 1, 1)
        out = np.ascontiguousarray(out)

        def backward(g):
            g_on = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
            gw = (g_on @ cols.T).reshape(weight.shape)
            # one GEMM for all taps, then scatter-add each tap in (c, n, h, w) layout
            taps = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o) @ g_on
            taps = taps.reshape(kh, kw, c, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += taps[i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            gx = gx[:, :, padding : padding + h, padding : padding + w] if padding else gx
            gx = np.ascontiguousarray(gx)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    res = Tensor._make(out, parents, backward, "conv2d")
    return _unbatched(res, squeeze)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``out_i = sum_j W_ij x_j + b_i`` for ``x`` of shape ``n`` or ``N x n``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, weight.shape[0])
        gw = g2.T @ x.data.reshape(-1, weight.shape[1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def directional_pool(x: Tensor, axis: str, mode: str) -> Tensor:
    """Collapse the width (``axis="width"``) or height axis to extent 1.

    ``mode="max"`` routes the gradient to the first arg-max in scan order;
    ``mode="avg"`` spreads it uniformly.
    """
    if axis not in ("width", "height"):
        raise ValueError(f"axis must be 'width' or 'height', got {axis!r}")
    if mode not in ("max", "avg"):
        raise ValueError(f"mode must be 'max' or 'avg', got {mode!r}")
    if x.ndim not in (3, 4) or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"directional_pool: bad input shape {x.shape}")
    ax = x.ndim - 1 if axis == "width" else x.ndim - 2
    if mode == "avg":
        extent = x.shape[ax]
        out = x.data.mean(axis=ax, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / extent, x.shape).copy(),)

        return Tensor._make(out, (x,), backward, "directional_avg")

    idx = np.argmax(x.data, axis=ax)
    log_kink(idx)
    idx = np.expand_dims(idx, ax)
    out = np.take_along_axis(x.data, idx, axis=ax)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=ax)
        return (gx,)

    return Tensor._make(out, (x,), backward, "directional_max")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over all spatial sites, keeping ``1 x 1`` extents."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: bad input shape {x.shape}")
    return x.mean(axis=(x.ndim - 2, x.ndim - 1), keepdims=True)


def avg_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: input {h}x{w} smaller than kernel {kernel}")
    crop = x.data[:, :, : ho * kernel, : wo * kernel]
    out = crop.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros_like(x.data)
        share = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        gx[:, :, : ho * kernel, : wo * kernel] = share
        return (gx,)

    return _unbatched(Tensor._make(out, (x,), backward, "avg_pool2d"), squeeze)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def backward(g):
        return (g * s * (1.0 - s),)

    return Tensor._make(s, (x,), backward, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log_kink(mask)

    def backward(g):
        return (g * mask,)

    return Tensor._make(x.data * mask, (x,), backward, "relu")


def h_swish(x: Tensor) -> Tensor:
    """``x * relu6(x + 3) / 6``."""
    d = x.data
    log_kink(np.digitize(d, (-3.0, 3.0)))
    gate = np.clip(d + 3.0, 0.0, 6.0) / 6.0
    inner = (d > -3.0) & (d < 3.0)

    def backward(g):
        return (g * (gate + inner * d / 6.0),)

    return Tensor._make(d * gate, (x,), backward, "h_swish")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def activation(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis)
    if kind == "h_swish":
        return h_swish(x)
    if kind == "relu":
        return relu(x)
    raise ValueError(f"unknown activation {kind!r}")


def clamped_log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """``log(max(x, floor))``; zero gradient where the floor is active."""
    clipped = np.maximum(x.data, floor)
    live = x.data >= floor

    def backward(g):
        return (g * live / clipped,)

    return Tensor._make(np.log(clipped), (x,), backward, "log")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

class RunningStats:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def copy(self) -> "RunningStats":
        out = RunningStats(len(self.mean))
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


_SUBS = {2: "nc", 4: "nchw"}


def _channel_sum(a: np.ndarray) -> np.ndarray:
    return np.einsum(f"{_SUBS[a.ndim]}->c", a)


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    s = _SUBS[a.ndim]
    return np.einsum(f"{s},{s}->c", a, b)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
    update_stats: bool = True,
) -> Tensor:
    """Normalise over every axis except the channel axis (axis 1).

    Accepts ``N x C`` or ``N x C x H x W``.  Train mode uses batch statistics
    (biased variance) and, if ``update_stats``, folds them into ``stats``.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects N x C or N x C x H x W, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(stats.var + eps)
        scale = (gamma.data * inv).reshape(bshape)
        out = (x.data - stats.mean.reshape(bshape)) * scale + beta.data.reshape(bshape)
        xhat = (x.data - stats.mean.reshape(bshape)) * inv.reshape(bshape)

        def backward(g):
            return g * scale, _channel_dot(g, xhat), _channel_sum(g)

        return Tensor._make(out, (x, gamma, beta), backward, "batch_norm")
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    m = x.data.size // c
    mu = (_channel_sum(x.data) / m).reshape(bshape)
    xc = x.data - mu
    var = (_channel_dot(xc, xc) / m).reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    if update_stats:
        stats.mean = (1 - momentum) * stats.mean + momentum * mu.reshape(c)
        stats.var = (1 - momentum) * stats.var + momentum * var.reshape(c)

    def backward(g):
        g_sum = _channel_sum(g)
        gxhat = _channel_dot(g, xhat)
        gam = gamma.data
        gx = (inv / m) * (m * g * gam.reshape(bshape) - (gam * g_sum).reshape(bshape) - xhat * (gam * gxhat).reshape(bshape))
        return gx, gxhat, g_sum

    return Tensor._make(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tensors, backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    out = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        out.append(take(x, tuple(index)))
        start += size
    return out


def take(x: Tensor, index) -> Tensor:
    """Basic-slicing view with a scatter-back gradient."""

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return Tensor._make(x.data[index], (x,), backward, "take")


def concat_hw(height_branch: Tensor, width_branch: Tensor) -> Tensor:
    """Join a ``c x h x 1`` map and a ``c x 1 x w`` map into ``c x (h+w) x 1``.

    The width branch is transposed to ``c x w x 1`` first.  Works batched.
    """
    a, b = height_branch, width_branch
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError(f"concat_hw: ranks differ or unsupported: {a.shape} vs {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"concat_hw: channel counts differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != 1 or b.shape[-2] != 1:
        raise ShapeError(f"concat_hw: expected c x h x 1 and c x 1 x w, got {a.shape} and {b.shape}")
    if a.shape[-2] < 1 or b.shape[-1] < 1:
        raise ShapeError("concat_hw: empty spatial extent")
    axes = tuple(range(b.ndim - 2)) + (b.ndim - 1, b.ndim - 2)
    return concat([a, b.transpose(*axes)], axis=a.ndim - 2)


def split_hw(joint: Tensor, h: int, w: int) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat_hw`."""
    if h < 1 or w < 1:
        raise ShapeError("split_hw: h and w must be >= 1")
    a, bt = split(joint, [h, w], axis=joint.ndim - 2)
    axes = tuple(range(bt.ndim - 2)) + (bt.ndim - 1, bt.ndim - 2)
    return a, bt.transpose(*axes)


__all__ = [
    "add",
    "mul",
    "conv2d",
    "linear",
    "directional_pool",
    "global_avg_pool",
    "avg_pool2d",
    "sigmoid",
    "relu",
    "h_swish",
    "softmax",
    "log_softmax",
    "activation",
    "clamped_log",
    "RunningStats",
    "batch_norm",
    "concat",
    "split",
    "take",
    "concat_hw",
    "split_hw",
]
