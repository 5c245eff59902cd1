"""Differentiable ops over :class:`Tensor`.

Every op computes its forward value with numpy, rejects non-finite output,
and records a local gradient rule when a tape is active.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from capforge import _kernels
from capforge.errors import ContractError
from capforge.numerics.tensor import Tensor, active_tape, as_tensor, check_finite


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    check_finite(data, op)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor._wrap(data, True, op)
        tape.record(op, parents, out, rule)
        return out
    return Tensor._wrap(data, False, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _emit("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form is overflow-free and gives exactly 0.5 at 0
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# ------------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2:
        raise ContractError(f"matmul supports (n,)|(m,n) @ (n,k), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def rule(g):
        if a.data.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), rule)


# ------------------------------------------------------------------ reductions

def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis)), (x,), rule)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def masked_max(x, mask: np.ndarray, axis: int = 0) -> Tensor:
    """Max over ``axis`` ignoring positions where ``mask`` is False.

    The subgradient goes to the first maximal position.
    """
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=axis).all():
        raise ContractError("masked_max: a reduced slice has no unmasked entries")
    filled = np.where(mask, x.data, -np.inf)
    arg = np.argmax(filled, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit("masked_max", out, (x,), rule)


# ------------------------------------------------------------------ shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _emit("transpose", x.data.T, (x,), lambda g: (g.T,))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(Ellipsis))) for i in parts)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic(idx)

    def rule(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _emit("getitem", np.array(x.data[idx]), (x,), rule)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit("concat", np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return _emit("stack", np.stack([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table`` selected by integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("take_rows", table.data[ids], (table,), rule)


# ------------------------------------------------------------------ convolution

def conv2d_same(x, w, b) -> Tensor:
    """3x3 stride-1 zero-padded convolution over NHWC input.

    ``w`` has shape ``(3, 3, C_in, C_out)``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    kh, kw, cin, cout = w.shape
    if x.data.ndim != 4 or x.shape[3] != cin:
        raise ContractError(f"conv2d_same: input {x.shape} incompatible with kernel {w.shape}")
    n, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # (n, h, w, c, kh, kw) -> (n, h, w, kh, kw, c)
    patches = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    patches = np.ascontiguousarray(patches.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * wd, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (patches @ wmat + b.data).reshape(n, h, wd, cout)

    def rule(g):
        g2 = g.reshape(n * h * wd, cout)
        gw = (patches.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dpatch = (g2 @ wmat.T).reshape(n, h, wd, kh, kw, cin)
            gx = _kernels.col2im(dpatch)[:, ph:ph + h, pw:pw + wd, :]
        return gx, gw, gb

    return _emit("conv2d", out, (x, w, b), rule)


def maxpool2x2(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ContractError(f"maxpool2x2 needs NHWC with even H, W; got {x.shape}")
    out, arg = _kernels.maxpool2x2(x.data)
    return _emit("maxpool2x2", out, (x,), lambda g: (_kernels.maxpool2x2_backward(g, arg),))


# ------------------------------------------------------------------ losses

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets, reduction: str = "mean") -> Tensor:
    """Negative log-softmax probability of ``targets`` per row.

    ``reduction`` is ``"mean"`` (scalar), ``"sum"`` or ``"none"`` (per row).
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ContractError(f"logits must be [batch x vocab], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    batch, vocab = logits.shape
    if targets.shape != (batch,):
        raise ContractError(f"need {batch} targets, got shape {targets.shape}")
    if batch and (targets.min() < 0 or targets.max() >= vocab):
        raise ContractError(f"target ids must lie in [0, {vocab})")
    logp = log_softmax(logits.data)
    rows = np.arange(batch)
    losses = -logp[rows, targets]
    if reduction == "none":
        out, scale = losses, None
    elif reduction == "sum":
        out, scale = np.asarray(losses.sum()), 1.0
    elif reduction == "mean":
        out, scale = np.asarray(losses.mean()), 1.0 / batch
    else:
        raise ContractError(f"unknown reduction {reduction!r}")

    def rule(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        if scale is None:
            return (p * g[:, None],)
        return (p * (g * scale),)

    return _emit("softmax_cross_entropy", out, (logits,), rule)


def binary_cross_entropy(p, labels, eps: float = 1e-7) -> Tensor:
    """Mean BCE over the last axis, probabilities clamped to ``[eps, 1-eps]``."""
    p = as_tensor(p)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != p.shape:
        raise ContractError(f"labels shape {y.shape} != predictions shape {p.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("labels must be 0 or 1")
    q = np.clip(p.data, eps, 1.0 - eps)
    d = p.shape[-1]
    out = -(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)).mean(axis=-1)
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)

    def rule(g):
        local = (-y / q + (1.0 - y) / (1.0 - q)) / d
        return (np.expand_dims(g, -1) * local * inside,)

    return _emit("binary_cross_entropy", np.asarray(out), (p,), rule)
