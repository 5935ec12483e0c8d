"""Differentiable primitives over :class:`~ctxspeech.tensor.Tensor`.

Sequences are laid out ``[length, channels]`` (no batch axis); convolutions
slide over axis 0.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, _add_macs, as_tensor, record, stop_gradient

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "sum_", "mean", "exp", "tanh",
    "sigmoid", "relu", "elu_plus_one", "softmax", "layer_norm", "conv1d",
    "depthwise_conv1d", "glu", "dropout", "concat", "slice_", "transpose",
    "reshape", "take_along_last", "repeat_rows", "stop_gradient", "broadcast_add",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


broadcast_add = add


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return record("div", (a, b), out,
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of ``[m, k] @ [k, n]``; a 1-D right operand is a column."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    m, k = a.shape
    n = 1 if b.ndim == 1 else b.shape[1]
    _add_macs(m * k * n)

    def backward(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return record("matmul", (a, b), a.data @ b.data, backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def elu_plus_one(a) -> Tensor:
    """``elu(x) + 1``: ``x + 1`` for ``x > 0``, ``exp(x)`` otherwise; always > 0."""
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    out = np.where(pos, x + 1.0, np.exp(np.minimum(x, 0.0)))
    return record("elu_plus_one", (a,), out, lambda g: (g * np.where(pos, 1.0, out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", (a,), out, backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gamma.shape} / bias {beta.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = g * gamma.data
        dx = inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", (x, gamma, beta), out, backward)


def _pads(kernel: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        left = (kernel - 1) // 2
        return left, kernel - 1 - left
    if padding == "valid":
        return 0, 0
    raise ValueError(f"unknown padding mode {padding!r}")


def conv1d(x, weight, bias=None, padding: str = "same") -> Tensor:
    """1-D convolution over time.

    ``x`` is ``[L, C_in]``, ``weight`` is ``[K, C_in, C_out]``, ``bias`` is
    ``[C_out]``.  ``"same"`` zero-pads so the output keeps length ``L``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 3 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernel {weight.shape}")
    k, cin, cout = weight.shape
    left, right = _pads(k, padding)
    xp = np.pad(x.data, ((left, right), (0, 0)))
    lout = xp.shape[0] - k + 1
    if lout < 1:
        raise DimensionError(f"conv1d: input length {x.shape[0]} shorter than kernel {k}")
    # [Lout, C_in, K] -> [Lout, K, C_in] -> [Lout, K*C_in]
    # The strided view must be copied to contiguous memory or matmul skips BLAS.
    cols = np.ascontiguousarray(sliding_window_view(xp, k, axis=0).transpose(0, 2, 1)).reshape(lout, k * cin)
    wmat = weight.data.reshape(k * cin, cout)
    out = cols @ wmat
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv1d: bias {bias.shape} vs {cout} output channels")
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        dcols = (g @ wmat.T).reshape(lout, k, cin)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[j:j + lout] += dcols[:, j]
        grads = [dxp[left:left + x.shape[0]], (cols.T @ g).reshape(k, cin, cout)]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record("conv1d", inputs, out, backward)


def depthwise_conv1d(x, weight, bias=None, padding: str = "same") -> Tensor:
    """Per-channel convolution: ``x`` ``[L, C]``, ``weight`` ``[K, C]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"depthwise_conv1d: input {x.shape} incompatible with kernel {weight.shape}")
    k = weight.shape[0]
    left, right = _pads(k, padding)
    xp = np.pad(x.data, ((left, right), (0, 0)))
    lout = xp.shape[0] - k + 1
    if lout < 1:
        raise DimensionError(f"depthwise_conv1d: input length {x.shape[0]} shorter than kernel {k}")
    out = np.zeros((lout, x.shape[1]))
    for j in range(k):
        out += xp[j:j + lout] * weight.data[j]
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (x.shape[1],):
            raise DimensionError(f"depthwise_conv1d: bias {bias.shape} vs {x.shape[1]} channels")
        out += bias.data
        inputs = (x, weight, bias)

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(weight.data)
        for j in range(k):
            dxp[j:j + lout] += g * weight.data[j]
            dw[j] = (g * xp[j:j + lout]).sum(axis=0)
        grads = [dxp[left:left + x.shape[0]], dw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record("depthwise_conv1d", inputs, out, backward)


def glu(x, axis: int = -1) -> Tensor:
    """Gated linear unit: first half of ``axis`` times sigmoid of the second half."""
    x = as_tensor(x)
    n = x.shape[axis]
    if n % 2:
        raise DimensionError(f"glu: axis of size {n} cannot be halved")
    a, b = np.split(x.data, 2, axis=axis)
    gate = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * gate, g * a * gate * (1.0 - gate)], axis=axis),)

    return record("glu", (x,), a * gate, backward)


def dropout(x, rate: float, seed: int, training: bool = True) -> Tensor:
    """Inverted dropout with a mask drawn from ``seed``; identity when not training."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return record("dropout", (x,), x.data * scale, lambda g: (g * scale,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis for p in parts)

    def backward(g):
        dx = np.zeros_like(x.data)
        if basic:
            dx[index] += g
        else:
            np.add.at(dx, index, g)
        return (dx,)

    return record("slice", (x,), np.array(out), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return record("transpose", (x,), x.data.T, lambda g: (g.T,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def take_along_last(x, index: np.ndarray) -> Tensor:
    """``out[i, j] = x[i, index[i, j]]`` for ``[L, d]`` operands."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != x.shape:
        raise DimensionError(f"take_along_last: index {index.shape} vs input {x.shape}")
    out = np.take_along_axis(x.data, index, axis=-1)

    def backward(g):
        dx = np.zeros_like(x.data)
        rows = np.arange(x.shape[0])[:, None]
        np.add.at(dx, (rows, index), g)
        return (dx,)

    return record("take_along_last", (x,), out, backward)


def repeat_rows(x, counts: Sequence[int]) -> Tensor:
    """Repeat row ``p`` of ``x`` ``counts[p]`` times (counts must be positive)."""
    x = as_tensor(x)
    counts = np.asarray(counts, dtype=np.intp)
    if counts.shape != (x.shape[0],):
        raise DimensionError(f"repeat_rows: {counts.shape[0] if counts.ndim else 0} counts for {x.shape[0]} rows")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    out = np.repeat(x.data, counts, axis=0)
    return record("repeat_rows", (x,), out, lambda g: (np.add.reduceat(g, starts, axis=0),))
