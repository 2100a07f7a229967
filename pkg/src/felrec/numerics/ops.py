"""Differentiable nonlinearities, normalizations and fused kernels."""

from __future__ import annotations

import numpy as np

from felrec.numerics.tensor import ShapeError, Tensor, as_tensor, make_node, tsum


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return make_node(np.where(positive, x.data, 0).astype(x.dtype), (x,), lambda g: (g * positive,), "relu")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``. Positions where ``mask`` is false get weight exactly 0.

    A slice with no unmasked position returns all zeros instead of NaN.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            z = np.where(mask, z, -np.inf)
        except ValueError:
            raise ShapeError(f"softmax: mask {mask.shape} does not broadcast to {x.shape}") from None
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0)
    e = np.exp(z - zmax)
    total = e.sum(axis=axis, keepdims=True)
    p = e / np.where(total > 0, total, 1)
    p = p.astype(x.dtype, copy=False)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=axis, keepdims=True)
    out = z - np.log(total)

    def backward(g):
        e_norm = e / total
        return (g - e_norm * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(out, (x, gamma, beta), backward, "layer_norm")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over axis 0 of a (batch, features) input.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place; otherwise the running statistics are used.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: expected (N, {gamma.shape[0]}) input, got {x.shape}")
    n = x.shape[0]
    if training:
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = (centered * centered).mean(axis=0)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        centered = x.data - running_mean
        var = running_var
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = rstd * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
            else:
                gx = gxhat * rstd
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return make_node(out, (x, gamma, beta), backward, "batch_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors by 1/(1-p)."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {p}")
    keep = rng.random(x.shape, dtype=np.float32) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    factor = keep * scale
    return make_node(x.data * factor, (x,), lambda g: (g * factor,), "dropout")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of (batch, length, features), counting only mask==1 rows.

    A row with no unmasked positions yields zeros.
    """
    mask = np.asarray(mask)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean: input {x.shape} and mask {mask.shape} disagree")
    w = mask.astype(x.dtype)
    count = np.maximum(w.sum(axis=1, keepdims=True), 1)
    w = (w / count)[:, :, None]
    out = (x.data * w).sum(axis=1)
    return make_node(out, (x,), lambda g: (g[:, None, :] * w,), "masked_mean")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / sqrt(sum(x**2) + eps)`` along ``axis``."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out = x.data / norm

    def backward(g):
        return (g / norm - out * (g * out).sum(axis=axis, keepdims=True) / norm,)

    return make_node(out, (x,), backward, "l2_normalize")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise dot product along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return tsum(a * b, axis=-1)


def gather(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding-row lookup: ``table[index]`` for an integer index array."""
    index = np.asarray(index, dtype=np.intp)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-D, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"gather: index out of range for table with {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(table.data[index], (table,), backward, "gather")
