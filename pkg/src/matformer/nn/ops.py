"""Differentiable operations on :class:`~matformer.nn.tensor.Tensor`.

Every op computes its forward value with numpy and, when any input requires
grad and recording is enabled, attaches a closure that maps the output
gradient to input gradients.
"""

from __future__ import annotations

import math

import numpy as np

from matformer.errors import DimensionError
from matformer.nn.tensor import Tensor, is_grad_enabled

ACTIVATIONS = ("squared_relu", "gelu")

_GELU_C = math.sqrt(2.0 / math.pi)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data, _op=op)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # fold leading axes into one GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g: np.ndarray) -> None:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                a._accum((g2 @ b.data.T).reshape(a.shape), fresh=True)
            if b.requires_grad:
                b._accum(a2.T @ g2, fresh=True)

        return _result(out, (a, b), backward, "matmul")

    out = np.matmul(a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape), fresh=True)
        if b.requires_grad:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape), fresh=True)

    return _result(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g: np.ndarray) -> None:
        for t in (a, b):
            if t.requires_grad:
                gt = _unbroadcast(g, t.shape)
                t._accum(gt, fresh=gt is not g)

    return _result(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product with broadcasting."""
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape), fresh=True)

    return _result(out, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g: np.ndarray) -> None:
        x._accum(g * c, fresh=True)

    return _result(x.data * c, (x,), backward, "scale")


def mean(x: Tensor) -> Tensor:
    """Mean over all elements, as a 0-d tensor."""
    n = x.size

    def backward(g: np.ndarray) -> None:
        x._accum(np.broadcast_to(g / n, x.shape))

    return _result(np.asarray(x.data.mean()), (x,), backward, "mean")


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; with ``axes=None`` swap the last two."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError("transpose needs at least 2 axes")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        x._accum(np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), backward, "transpose")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    def backward(g: np.ndarray) -> None:
        x._accum(g.reshape(x.shape))

    return _result(out, (x,), backward, "reshape")


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``start:stop`` along ``axis``."""
    axis = axis % x.ndim
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"narrow [{start}:{stop}] outside axis {axis} of size {x.shape[axis]}")
    index = (slice(None),) * axis + (slice(start, stop),)

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[index] = g
        x._accum(full, fresh=True)

    return _result(x.data[index], (x,), backward, "narrow")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _result(out, tuple(tensors), backward, "concat")


def activation(x: Tensor, kind: str = "squared_relu") -> Tensor:
    """Element-wise non-linearity.

    ``gelu`` is the tanh form of GELU; its backward pass is the exact
    derivative of that form.
    """
    if kind == "squared_relu":
        r = np.maximum(x.data, 0.0)

        def backward(g: np.ndarray) -> None:
            x._accum(2.0 * r * g, fresh=True)

        return _result(r * r, (x,), backward, "squared_relu")
    if kind == "gelu":
        u = x.data
        inner = _GELU_C * (u + 0.044715 * u**3)
        t = np.tanh(inner)
        out = 0.5 * u * (1.0 + t)

        def backward(g: np.ndarray) -> None:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
            x._accum(g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * d_inner), fresh=True)

        return _result(out, (x,), backward, "gelu")
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learned gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, d).sum(axis=0), fresh=True)
        if bias.requires_grad:
            bias._accum(g.reshape(-1, d).sum(axis=0), fresh=True)
        if x.requires_grad:
            dxhat = g * gain.data
            x._accum(
                inv_std
                * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)),
                fresh=True,
            )

    return _result(out, (x, gain, bias), backward, "layer_norm")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(full, fresh=True)

    return _result(out, (table,), backward, "embedding_lookup")


def row_slice(w: Tensor, k: int) -> Tensor:
    """Zero-copy view of the first ``k`` rows of ``w``.

    Gradients through the view land in ``w.grad[:k]``; rows at or beyond
    ``k`` are never written.
    """
    if not 0 < k <= w.shape[0]:
        raise DimensionError(f"row_slice k={k} outside (0, {w.shape[0]}]")

    def backward(g: np.ndarray) -> None:
        w._accum_rows(g, k)

    return _result(w.data[:k], (w,), backward, "row_slice")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    Args:
        x: Scores.
        mask: Optional boolean array broadcastable to ``x``; ``False`` entries
            get probability exactly zero. Every row needs at least one
            ``True``.
    """
    z = x.data.copy() if mask is None else np.where(mask, x.data, -np.inf)
    z -= z.max(axis=-1, keepdims=True)
    p = np.exp(z, out=z)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        gp = g * p
        gp -= p * gp.sum(axis=-1, keepdims=True)
        x._accum(gp, fresh=True)

    return _result(p, (x,), backward, "softmax")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` may be ``[N, V]`` or ``[B, T, V]``; ``targets`` has the matching
    leading shape.
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    n = t.size
    logp = log_softmax_np(flat)
    loss = -logp[np.arange(n), t].mean()

    def backward(g: np.ndarray) -> None:
        d = np.exp(logp)
        d[np.arange(n), t] -= 1.0
        logits._accum((d * (float(g) / n)).reshape(logits.shape), fresh=True)

    return _result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")
