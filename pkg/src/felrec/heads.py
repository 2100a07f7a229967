"""Projection/prediction MLPs and the two symmetrized training objectives."""

from __future__ import annotations

import numpy as np

from felrec.numerics import ops
from felrec.numerics.layers import BatchNorm, LayerNorm, Linear, Module
from felrec.numerics.tensor import ShapeError, Tensor, make_node, stop_gradient

VARIANTS = ("q", "p")
NORMS = ("batch", "layer")


class MLP(Module):
    """linear -> batch/layer norm -> ReLU -> linear."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, rng, norm: str = "batch", dtype=np.float64):
        if norm not in NORMS:
            raise ValueError(f"unknown normalization {norm!r}")
        self.fc1 = Linear(in_dim, hidden_dim, rng, dtype)
        self.norm = BatchNorm(hidden_dim, dtype) if norm == "batch" else LayerNorm(hidden_dim, dtype)
        self.fc2 = Linear(hidden_dim, out_dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.relu(self.norm(self.fc1(x))))


class Heads(Module):
    """The MLPs that sit between encoder outputs and the loss.

    Variant ``q``: projections g_user, g_item of shape dim -> dim -> dim.
    Variant ``p``: bottleneck projections dim -> 2*dim -> dim/2 and
    predictors h_user, h_item of shape dim/2 -> 2*dim -> dim/2.
    """

    def __init__(
        self,
        variant: str = "q",
        dim: int = 128,
        rng=None,
        norm: str = "batch",
        share_mlp: bool = False,
        no_mlp: bool = False,
        dtype=np.float64,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected 'q' or 'p'")
        if no_mlp and variant == "p":
            raise ValueError("the no-mlp ablation is defined for variant q only")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.variant = variant
        self.g_user = self.g_item = self.h_user = self.h_item = None
        if variant == "q":
            self.out_dim = dim
            if not no_mlp:
                self.g_user = MLP(dim, dim, dim, rng, norm, dtype)
                self.g_item = self.g_user if share_mlp else MLP(dim, dim, dim, rng, norm, dtype)
        else:
            self.out_dim = dim // 2
            self.g_user = MLP(dim, 2 * dim, dim // 2, rng, norm, dtype)
            self.g_item = self.g_user if share_mlp else MLP(dim, 2 * dim, dim // 2, rng, norm, dtype)
            self.h_user = MLP(dim // 2, 2 * dim, dim // 2, rng, norm, dtype)
            self.h_item = MLP(dim // 2, 2 * dim, dim // 2, rng, norm, dtype)

    def project_user(self, r: Tensor) -> Tensor:
        return r if self.g_user is None else self.g_user(r)

    def project_item(self, r: Tensor) -> Tensor:
        return r if self.g_item is None else self.g_item(r)


class NegativeQueue:
    """Fixed-capacity FIFO ring buffer of detached projection vectors."""

    def __init__(self, capacity: int = 8192, dim: int = 128, dtype=np.float64):
        if capacity <= 0:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim), dtype=dtype)
        self.head = 0  # next write position
        self.fill = 0

    def __len__(self) -> int:
        return self.fill

    def enqueue(self, vectors) -> None:
        vectors = np.asarray(vectors.data if isinstance(vectors, Tensor) else vectors)
        vectors = vectors.reshape(-1, self.dim) if vectors.ndim == 1 else vectors
        if vectors.shape[1] != self.dim:
            raise ShapeError(f"enqueue: expected vectors of dimension {self.dim}, got {vectors.shape}")
        vectors = vectors[-self.capacity :]
        n = len(vectors)
        idx = (self.head + np.arange(n)) % self.capacity
        self.buffer[idx] = vectors
        self.head = (self.head + n) % self.capacity
        self.fill = min(self.fill + n, self.capacity)

    def contents(self) -> np.ndarray:
        """Copy of the stored vectors, oldest first."""
        start = (self.head - self.fill) % self.capacity
        idx = (start + np.arange(self.fill)) % self.capacity
        return self.buffer[idx].copy()

    def clear(self) -> None:
        self.head = 0
        self.fill = 0


class Queues:
    def __init__(self, capacity: int, dim: int, dtype=np.float64):
        self.items = NegativeQueue(capacity, dim, dtype)
        self.users = NegativeQueue(capacity, dim, dtype)

    def clear(self) -> None:
        self.items.clear()
        self.users.clear()


def infonce_loss(anchor: Tensor, positive: Tensor, negatives, tau: float = 0.07) -> Tensor:
    """Mean over rows of ``-log softmax([a.p, a.n_1, ..., a.n_K] / tau)[0]``.

    Similarities are raw dot products. ``negatives`` is a (K, dim) array of
    constants; K may be zero, in which case the loss is exactly 0.
    """
    if tau <= 0:
        raise ValueError(f"infonce: temperature must be positive, got {tau}")
    anchor = anchor if isinstance(anchor, Tensor) else Tensor(anchor)
    positive = positive if isinstance(positive, Tensor) else Tensor(positive)
    if anchor.ndim == 1:
        anchor, positive = anchor.reshape(1, -1), positive.reshape(1, -1)
    negatives = np.asarray(negatives, dtype=anchor.dtype).reshape(-1, anchor.shape[-1])
    if anchor.shape != positive.shape:
        raise ShapeError(f"infonce: anchor {anchor.shape} and positive {positive.shape} disagree")
    a, pos = anchor.data, positive.data
    n = a.shape[0]
    scale = 1.0 / tau
    logits = np.empty((n, len(negatives) + 1), dtype=a.dtype)
    logits[:, 0] = (a * pos).sum(axis=1)
    np.matmul(a, negatives.T, out=logits[:, 1:])
    logits *= scale
    top = logits.max(axis=1, keepdims=True)
    np.subtract(logits, top, out=logits)
    np.exp(logits, out=logits)
    total = logits.sum(axis=1, keepdims=True)
    loss = (np.log(total[:, 0]) + top[:, 0] - scale * (a * pos).sum(axis=1)).mean()
    probs = logits
    probs /= total  # softmax over [positive, negatives]

    def backward(g):
        coef = (g * scale / n) * (probs[:, :1] - 1.0)
        ga = coef * pos
        if len(negatives):
            ga = ga + (g * scale / n) * (probs[:, 1:] @ negatives)
        return ga, coef * a

    return make_node(np.asarray(loss, dtype=a.dtype), (anchor, positive), backward, "infonce")


def byol_loss(prediction: Tensor, target: Tensor, eps: float = 1e-12) -> Tensor:
    """Mean over rows of ``2 - 2 cos(prediction, target)``; ranges over [0, 4]."""
    prediction = prediction if isinstance(prediction, Tensor) else Tensor(prediction)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if prediction.ndim == 1:
        prediction, target = prediction.reshape(1, -1), target.reshape(1, -1)
    cos = ops.dot(ops.l2_normalize(prediction, eps=eps), ops.l2_normalize(target, eps=eps))
    return (2.0 - 2.0 * cos).mean()


def loss_q(
    u_repr: Tensor,
    x_repr: Tensor,
    heads: Heads,
    queues: Queues,
    tau: float = 0.07,
    enqueue: bool = True,
    normalize: bool = False,
) -> tuple[Tensor, Tensor, Tensor]:
    """Queue-contrastive loss ``L_u + L_x``; returns ``(total, L_u, L_x)``.

    Negatives are the queue contents before this call. The current batch's
    projections are enqueued afterwards. With ``normalize`` the projections
    are scaled to unit length first, so the dot product becomes a cosine.
    """
    u_hat = heads.project_user(u_repr)
    x_hat = heads.project_item(x_repr)
    if normalize:
        u_hat, x_hat = ops.l2_normalize(u_hat), ops.l2_normalize(x_hat)
    loss_u = infonce_loss(u_hat, stop_gradient(x_hat), queues.items.contents(), tau)
    loss_x = infonce_loss(x_hat, stop_gradient(u_hat), queues.users.contents(), tau)
    if enqueue:
        queues.items.enqueue(x_hat.data)
        queues.users.enqueue(u_hat.data)
    return loss_u + loss_x, loss_u, loss_x


def loss_p(u_repr: Tensor, x_repr: Tensor, heads: Heads) -> tuple[Tensor, Tensor, Tensor]:
    """Predictor-similarity loss ``L_u + L_x``; returns ``(total, L_u, L_x)``."""
    z_user = heads.project_user(u_repr)
    z_item = heads.project_item(x_repr)
    loss_u = byol_loss(heads.h_user(z_user), stop_gradient(z_item))
    loss_x = byol_loss(heads.h_item(z_item), stop_gradient(z_user))
    return loss_u + loss_x, loss_u, loss_x
