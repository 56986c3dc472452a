"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients. Convolution uses the
cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import EmptyTarget, InvalidRate, ShapeMismatch
from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _operands(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    b = as_tensor(b)
    return as_tensor(a, b.dtype), b


# ------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (residual shortcut join)."""
    a, b = _operands(a, b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make_result("power", out, (a,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN, so a diverged activation still reaches the loss
    return make_result("relu", np.maximum(x.data, 0).astype(x.dtype, copy=False), (x,),
                       lambda g: (g * mask,))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result("sum", out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {x.shape} -> {shape}") from exc
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice) indexing; gradient scatters back into place."""
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result("index", np.array(out), (x,), backward)


# ------------------------------------------------------------- structural

def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """(N, C_in, L) * (C_out, C_in, K) -> (N, C_out, floor((L + 2p - K)/s) + 1)."""
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeMismatch(f"conv1d expects 3-d input and weight, got {x.shape}, {weight.shape}")
    n, c_in, length = x.shape
    c_out, c_w, k = weight.shape
    if c_w != c_in:
        raise ShapeMismatch(f"conv1d: input has {c_in} channels, weight expects {c_w}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv1d: bias shape {bias.shape}, expected ({c_out},)")
    if stride < 1 or padding < 0:
        raise ShapeMismatch("conv1d: stride must be >= 1 and padding >= 0")
    padded = length + 2 * padding
    if k > padded:
        raise ShapeMismatch(f"conv1d: kernel {k} longer than padded input {padded}")
    l_out = (padded - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :l_out]  # (N, C, Lo, K)
    out = np.tensordot(windows, weight.data, axes=([1, 3], [1, 2]))  # (N, Lo, C_out)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    if bias is not None:
        out += bias.data[None, :, None]

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # (N, Lo, C_in, K)
            gxp = np.zeros(xp.shape, dtype=np.result_type(g, weight.data))
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gxp[:, :, j:j + span:stride] += cols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, padding:padding + length] if padding else gxp
        if weight.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2], [0, 2]))  # (C_out, C_in, K)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("conv1d", out, inputs, backward)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (N, C, L).

    Training mode uses biased batch statistics and updates the running
    estimates in place (unbiased variance); eval mode uses the running ones.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"batchnorm1d expects (N, C, L), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batchnorm1d: affine params must have shape ({c},)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeMismatch(f"batchnorm1d: running stats must have shape ({c},)")
    count = x.shape[0] * x.shape[2]
    if training:
        if count < 2:
            raise ShapeMismatch("batchnorm1d: training mode needs N*L > 1")
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x.data - mu[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        dxhat = g * gamma.data[None, :, None]
        if training:
            gx = (inv_std[None, :, None] / count) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True))
        else:
            gx = dxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return make_result("batchnorm1d", out, (x, gamma, beta), backward)


def maxpool1d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    if x.ndim != 3:
        raise ShapeMismatch(f"maxpool1d expects (N, C, L), got {x.shape}")
    n, c, length = x.shape
    padded = length + 2 * padding
    if kernel > padded:
        raise ShapeMismatch("maxpool1d: kernel longer than padded input")
    l_out = (padded - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf) \
        if padding else x.data
    windows = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride][:, :, :l_out]
    arg = windows.argmax(axis=3)
    out = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        span = stride * (l_out - 1) + 1
        for j in range(kernel):
            gxp[:, :, j:j + span:stride] += g * (arg == j)
        return (gxp[:, :, padding:padding + length] if padding else gxp,)

    return make_result("maxpool1d", np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, L) -> (N, C), mean over time."""
    if x.ndim != 3:
        raise ShapeMismatch(f"global_avg_pool expects (N, C, L), got {x.shape}")
    length = x.shape[2]
    out = x.data.mean(axis=2)

    def backward(g):
        return (np.broadcast_to(g[:, :, None] / length, x.shape).astype(x.dtype),)

    return make_result("global_avg_pool", out, (x,), backward)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map (N, D) -> (N, O) with weight stored as (O, D)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"dense: bias shape {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result("dense", out, inputs, backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeMismatch("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", out, tensors, backward)


def spatial_dropout(x: Tensor, rate: float, training: bool,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Drop whole channels of (N, C, L) with probability ``rate`` and scale
    survivors by 1/(1 - rate). Identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise InvalidRate(f"dropout rate must be in [0, 1), got {rate}")
    if x.ndim != 3:
        raise ShapeMismatch(f"spatial_dropout expects (N, C, L), got {x.shape}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("spatial_dropout in training mode needs an rng")
    keep = rng.random((x.shape[0], x.shape[1], 1)) >= rate
    mask = (keep / (1.0 - rate)).astype(x.dtype)
    return make_result("spatial_dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------- loss

def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def head_loss(logits: Tensor, targets, mode: str = "sigmoid_bce") -> Tensor:
    """Mean classification loss over the batch.

    ``softmax_ce``: cross-entropy against each target row normalized to sum 1.
    ``sigmoid_bce``: binary cross-entropy averaged over every (row, class).
    """
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeMismatch(f"head_loss: logits {logits.shape} vs targets {t.shape}")
    z = logits.data
    n = z.shape[0]
    if mode in ("softmax_ce", "softmax"):
        row = t.sum(axis=1, keepdims=True)
        if np.any(row <= 0):
            raise EmptyTarget("softmax_ce needs at least one positive target per row")
        dist = t / row
        shifted = z - z.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -(dist * log_p).sum() / n

        def backward(g):
            return (g * (np.exp(log_p) - dist) / n,)

    elif mode in ("sigmoid_bce", "sigmoid"):
        loss = -(t * _log_sigmoid(z) + (1.0 - t) * _log_sigmoid(-z)).mean()
        count = z.size

        def backward(g):
            sig = np.exp(_log_sigmoid(z))
            return (g * (sig - t) / count,)

    else:
        raise ValueError(f"unknown head_loss mode {mode!r}")
    return make_result("head_loss", np.asarray(loss, dtype=logits.dtype), (logits,), backward)
