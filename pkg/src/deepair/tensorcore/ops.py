"""Differentiable operations.

Every op takes and returns :class:`Tensor` objects, checks its output for
non-finite values and records a backward closure on the active tape.
Arrays keep the dtype of their inputs; reductions accumulate in float64.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, record


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _dtype(*ts):
    return np.result_type(*[t.data.dtype for t in ts])


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, back)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return record("sub", (a, b), out, back)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, back)


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)

    def back(g):
        return (g * pos,)

    return record("relu", (x,), out, back)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data).astype(x.dtype)

    def back(g):
        return (g * s * (1 - s),)

    return record("sigmoid", (x,), s, back)


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)

    def back(g):
        return (g * (1 - t * t),)

    return record("tanh", (x,), t, back)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, back)


def index(x, key):
    """Basic or integer-array indexing; the gradient scatters back."""
    x = as_tensor(x)
    out = np.array(x.data[key])

    keys = key if isinstance(key, tuple) else (key,)
    basic = all(k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer)) for k in keys)

    def back(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return record("index", (x,), out, back)


def broadcast_to(x, shape):
    x = as_tensor(x)
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))

    def back(g):
        return (_unbroadcast(g, x.shape),)

    return record("broadcast_to", (x,), out, back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", tuple(tensors), out, back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record("stack", tuple(tensors), out, back)


def reduce_sum(x):
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def back(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return record("reduce_sum", (x,), out, back)


def mean(x, axis=None):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, dtype=np.float64).astype(x.dtype)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return record("mean", (x,), out, back)


def linear(x, w, b=None):
    """``x @ w + b`` with ``x`` (N, d_in), ``w`` (d_in, d_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    out = x.data @ w.data
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        inputs = (x, w, b)

    def back(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return record("linear", inputs, out, back)


def embedding(index, table):
    """Rows of ``table`` (V, d) selected by integer ``index`` (scalar or array)."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"embedding index out of range [0, {v}): {idx.min()}..{idx.max()}")
    out = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return record("embedding", (table,), out, back)


def _conv_dims(x, w):
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernel must be (C_out, C_in, k, k), got {w.shape}")
    k = w.shape[2]
    if k not in (1, 3):
        raise ShapeError(f"conv2d supports k in (1, 3), got {k}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    return k


def conv2d(x, w, b=None, padding=None):
    """Shape-preserving 2-D cross-correlation with zero padding.

    ``x`` is (N, C_in, H, W) or (C_in, H, W); ``w`` is (C_out, C_in, k, k)
    with k in {1, 3}; padding defaults to (k - 1) / 2.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    k = _conv_dims(x, w)
    if padding is not None and padding != (k - 1) // 2:
        raise ShapeError(f"conv2d only supports shape-preserving padding {(k - 1) // 2}")
    n, c, h, wd = x.shape
    o = w.shape[0]
    if b is not None:
        b = as_tensor(b)
    inputs = (x, w) if b is None else (x, w, b)

    if k == 1:
        wm = w.data.reshape(o, c)
        xf = x.data.reshape(n, c, h * wd)
        y = np.matmul(wm, xf).reshape(n, o, h, wd)
        if b is not None:
            y = y + b.data.reshape(1, o, 1, 1)

        def back(g):
            gf = g.reshape(n, o, h * wd)
            gx = np.matmul(wm.T, gf).reshape(x.shape)
            gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            if b is None:
                return gx, gw
            return gx, gw, gf.sum(axis=(0, 2))
    else:
        # Flattened padded planes: a tap (i, j) is a fixed offset along the
        # last axis, so each tap is one contiguous slice.
        wp = wd + 2
        flat = (h + 3) * wp
        span = h * wp
        xp = np.zeros((n, c, h + 3, wp), x.dtype)
        xp[:, :, 1:h + 1, 1:wd + 1] = x.data
        xf = xp.reshape(n, c, flat)
        cols = np.empty((n, 9, c, span), x.dtype)
        offsets = [i * wp + j for i in range(3) for j in range(3)]
        for t, off in enumerate(offsets):
            cols[:, t] = xf[:, :, off:off + span]
        cols = cols.reshape(n, 9 * c, span)
        wm = w.data.transpose(0, 2, 3, 1).reshape(o, 9 * c)
        y = np.matmul(wm, cols).reshape(n, o, h, wp)[:, :, :, :wd]
        y = np.ascontiguousarray(y)
        if b is not None:
            y = y + b.data.reshape(1, o, 1, 1)

        def back(g):
            gp = np.zeros((n, o, h, wp), g.dtype)
            gp[:, :, :, :wd] = g
            gf = gp.reshape(n, o, span)
            gw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
            dcols = np.matmul(wm.T, gf).reshape(n, 9, c, span)
            dxf = np.zeros((n, c, flat), g.dtype)
            for t, off in enumerate(offsets):
                dxf[:, :, off:off + span] += dcols[:, t]
            gx = np.ascontiguousarray(dxf.reshape(n, c, h + 3, wp)[:, :, 1:h + 1, 1:wd + 1])
            if b is None:
                return gx, np.ascontiguousarray(gw)
            return gx, np.ascontiguousarray(gw), g.sum(axis=(0, 2, 3))

    out = record("conv2d", inputs, y.astype(x.dtype, copy=False), back)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


class BatchNormState:
    """Running statistics of one batch-norm layer (not trainable)."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype)
        self.var = np.ones(channels, dtype)


def batchnorm(x, scale, shift, state, mode="train", momentum=0.1, eps=1e-5):
    """Per-channel normalisation over every axis but axis 1, then ``scale * x + shift``.

    In train mode the batch statistics are used and ``state`` is updated with
    ``momentum``; in eval mode the running statistics are used.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    count = x.size // x.shape[1]
    if mode == "train":
        if count < 2:
            raise ShapeError("batchnorm in train mode needs at least two values per channel")
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        unbiased = var * count / (count - 1)
        state.mean[...] = (1 - momentum) * state.mean + momentum * mu
        state.var[...] = (1 - momentum) * state.var + momentum * unbiased
    elif mode == "eval":
        mu = state.mean.astype(np.float64)
        var = state.var.astype(np.float64)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype).reshape(bshape)) * inv.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def back(g):
        gscale = (g * xhat).sum(axis=axes, dtype=np.float64).astype(scale.dtype)
        gshift = g.sum(axis=axes, dtype=np.float64).astype(shift.dtype)
        gxhat = g * scale.data.reshape(bshape)
        if mode == "train":
            m1 = gxhat.mean(axis=axes, dtype=np.float64).astype(x.dtype).reshape(bshape)
            m2 = (gxhat * xhat).mean(axis=axes, dtype=np.float64).astype(x.dtype).reshape(bshape)
            gx = (gxhat - m1 - xhat * m2) * inv.reshape(bshape)
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gscale, gshift

    return record("batchnorm", (x, scale, shift), out.astype(x.dtype, copy=False), back)


def lstm_cell(x, h_prev, c_prev, w_x, w_h, b):
    """One LSTM step with gate order (input, forget, cell, output).

    ``x`` (N, d_in), ``h_prev`` and ``c_prev`` (N, d_h), ``w_x`` (d_in, 4 d_h),
    ``w_h`` (d_h, 4 d_h), ``b`` (4 d_h). Returns ``(h, c)``.
    """
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    w_x, w_h, b = as_tensor(w_x), as_tensor(w_h), as_tensor(b)
    d = w_h.shape[0]
    if w_x.shape != (x.shape[-1], 4 * d) or w_h.shape != (d, 4 * d) or b.shape != (4 * d,):
        raise ShapeError(f"lstm_cell weights {w_x.shape}, {w_h.shape}, {b.shape} do not match "
                         f"input width {x.shape[-1]} and hidden {d}")
    if h_prev.shape[-1] != d or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm_cell state shapes {h_prev.shape}, {c_prev.shape} vs hidden {d}")
    z = x.data @ w_x.data + h_prev.data @ w_h.data + b.data
    i = _sigmoid(z[..., :d])
    f = _sigmoid(z[..., d:2 * d])
    gg = np.tanh(z[..., 2 * d:3 * d])
    o = _sigmoid(z[..., 3 * d:])
    c = f * c_prev.data + i * gg
    tc = np.tanh(c)
    h = o * tc

    def back(gh, gc):
        if gh is None:
            gh = np.zeros_like(h)
        dc = gh * o * (1 - tc * tc)
        if gc is not None:
            dc = dc + gc
        dz = np.concatenate([
            dc * gg * i * (1 - i),
            dc * c_prev.data * f * (1 - f),
            dc * i * (1 - gg * gg),
            gh * tc * o * (1 - o),
        ], axis=-1)
        x2 = x.data.reshape(-1, x.shape[-1])
        h2 = h_prev.data.reshape(-1, d)
        dz2 = dz.reshape(-1, 4 * d)
        return (dz @ w_x.data.T, dz @ w_h.data.T, dc * f,
                x2.T @ dz2, h2.T @ dz2, dz2.sum(axis=0))

    inputs = (x, h_prev, c_prev, w_x, w_h, b)
    return record("lstm_cell", inputs, (h.astype(x.dtype, copy=False), c.astype(x.dtype, copy=False)), back)


def mse_loss(pred, target):
    """Squared Euclidean norm of ``pred - target`` (a sum, not a mean)."""
    pred = as_tensor(pred)
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    out = np.asarray((diff.astype(np.float64) ** 2).sum(), dtype=pred.dtype)

    def back(g):
        return (2.0 * g * diff,)

    return record("mse_loss", (pred,), out, back)


def scale(x, factor):
    x = as_tensor(x)
    out = x.data * x.dtype.type(factor)

    def back(g):
        return (g * x.dtype.type(factor),)

    return record("scale", (x,), out, back)
