"""Primitive catalog. Every function takes and returns :class:`Tensor`."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeMismatch
from .tensor import Tensor, as_tensor, make_op, record_branch


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _broadcast_shape(a, b)
    return a, b


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeMismatch(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_op("div", value, (a, b), bw)


# -- elementwise unary -----------------------------------------------------

def neg(x: Tensor) -> Tensor:
    return make_op("neg", -x.data, (x,), lambda g: (-g,))


def pow(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = x.data ** p
    return make_op("pow", value, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        value = np.exp(x.data)
    return make_op("exp", value, (x,), lambda g: (g * value,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(x.data)
    return make_op("log", value, (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    value = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op("sigmoid", value, (x,), lambda g: (g * value * (1.0 - value),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    record_branch(mask)
    return make_op("relu", np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    record_branch(mask)
    value = np.where(mask, x.data, floor).astype(x.dtype)
    return make_op("clamp_min", value, (x,), lambda g: (g * mask,))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- reductions ------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    value = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op("sum", value, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    value = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_op("mean", value, (x,), bw)


def _argext(data, axes, fn):
    keep = [a for a in range(data.ndim) if a not in axes]
    moved = np.transpose(data, keep + list(axes))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = np.asarray(fn(flat, axis=-1))
    record_branch(idx)
    return keep, moved.shape, flat, idx


def max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over ``axis``; the gradient goes to the first maximizer in row-major order."""
    axes = _axes(axis, x.ndim)
    keep, moved_shape, flat, idx = _argext(x.data, axes, np.argmax)
    value = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if a in axes else n for a, n in enumerate(x.shape)) if keepdims else value.shape
    value = value.reshape(out_shape)

    def bw(g):
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
        inv = np.argsort(keep + list(axes))
        return (np.transpose(onehot.reshape(moved_shape), inv),)

    return make_op("max", value, (x,), bw)


def min(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, x.ndim)
    keep, moved_shape, flat, idx = _argext(x.data, axes, np.argmin)
    value = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out_shape = tuple(1 if a in axes else n for a, n in enumerate(x.shape)) if keepdims else value.shape
    value = value.reshape(out_shape)

    def bw(g):
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
        inv = np.argsort(keep + list(axes))
        return (np.transpose(onehot.reshape(moved_shape), inv),)

    return make_op("min", value, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_op("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = shifted - lse
    return make_op("log_softmax", value, (x,),
                   lambda g: (g - np.exp(value) * g.sum(axis=axis, keepdims=True),))


# -- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    try:
        value = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return make_op("reshape", value, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"bad permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return make_op("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_op("concat", value, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    value = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op("matmul", value, (a, b), bw)


# -- convolution and normalization ------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation of an N×C×H×W input with O×C×k×k kernels."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d needs rank-4 input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeMismatch(f"conv2d input has {c} channels, weight expects {ci}")
    if kh != kw or kh % 2 == 0:
        raise ShapeMismatch(f"kernel must be square and odd, got {kh}x{kw}")
    k, s, p = kh, int(stride), int(padding)
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * s + 1: s, : (wo - 1) * s + 1: s]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # N×Ho×Wo×O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))  # N×Ho×Wo×C
                gxp[:, :, i: i + (ho - 1) * s + 1: s, j: j + (wo - 1) * s + 1: s] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p: p + h, p: p + w] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight, None)
    return make_op("conv2d", out, inputs, bw)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, eps: float = 1e-5,
                momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalization of an N×C×H×W tensor.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance); in eval mode the running
    buffers are used.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    gm = gamma.data.reshape(1, -1, 1, 1)
    bt = beta.data.reshape(1, -1, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        unbiased = var.reshape(-1) * (m / (m - 1) if m > 1 else 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def bw(g):
            dxhat = g * gm
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std / m * (m * dxhat - sum_d - xhat * sum_dx)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv_std = 1.0 / np.sqrt(running_var.reshape(1, -1, 1, 1) + eps)
        xhat = (x.data - running_mean.reshape(1, -1, 1, 1)) * inv_std

        def bw(g):
            return g * gm * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_op("batchnorm2d", gm * xhat + bt, (x, gamma, beta), bw)
