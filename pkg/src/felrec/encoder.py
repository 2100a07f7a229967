"""Shared sequence encoder: bidirectional Transformer layers over cached vectors.

A user is encoded from the cached vectors of the items it interacted with and
an item from the cached vectors of its users. There is no positional signal,
so the pooled output is invariant to the order of a row's real positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from felrec.cache import ITEM, USER, RepresentationCache
from felrec.numerics import ops
from felrec.numerics.layers import LayerNorm, Linear, Module, parameter, trunc_normal
from felrec.numerics.tensor import ShapeError, Tensor

PAD = -1

# Row indices of the type table. A row is chosen by the kind of the
# sequence *elements*: a user is a sequence of items and gets ITEM_TYPE.
USER_TYPE = 0
ITEM_TYPE = 1
_KIND_OF_TYPE = {USER_TYPE: USER, ITEM_TYPE: ITEM}


@dataclass
class SequenceBatch:
    """Padded id sequences; real positions precede pads, pads carry id ``PAD``."""

    ids: np.ndarray  # (batch, L) int64
    mask: np.ndarray  # (batch, L) bool
    element_types: np.ndarray  # (batch,) USER_TYPE or ITEM_TYPE

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.element_types = np.asarray(self.element_types, dtype=np.int64)
        if self.ids.ndim != 2 or self.ids.shape != self.mask.shape:
            raise ShapeError(f"SequenceBatch: ids {self.ids.shape} and mask {self.mask.shape} must match")
        if self.element_types.shape != (self.ids.shape[0],):
            raise ShapeError("SequenceBatch: one element type per row required")

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @classmethod
    def from_lists(cls, sequences, element_types, length: int | None = None) -> SequenceBatch:
        longest = max((len(s) for s in sequences), default=0)
        length = max(longest if length is None else length, 1)
        ids = np.full((len(sequences), length), PAD, dtype=np.int64)
        for row, seq in enumerate(sequences):
            if seq:
                ids[row, : len(seq)] = seq
        types = np.broadcast_to(np.asarray(element_types), (len(sequences),))
        return cls(ids, ids != PAD, types)

    def trimmed(self) -> SequenceBatch:
        """Drop trailing all-pad columns (the output does not depend on them)."""
        width = max(int(self.lengths.max(initial=0)), 1)
        if width == self.ids.shape[1]:
            return self
        return SequenceBatch(self.ids[:, :width], self.mask[:, :width], self.element_types)


class AttentionLayer(Module):
    """Post-norm Transformer encoder layer with padding-only masking."""

    def __init__(self, dim: int, num_heads: int, ff_dim: int, dropout: float, rng, dtype=np.float64):
        if dim % num_heads:
            raise ValueError(f"model dimension {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.dropout = dropout
        self.query = Linear(dim, dim, rng, dtype)
        self.key = Linear(dim, dim, rng, dtype)
        self.value = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ff1 = Linear(dim, ff_dim, rng, dtype)
        self.ff2 = Linear(ff_dim, dim, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)

    def attention_weights(self, x: Tensor, mask: np.ndarray) -> Tensor:
        q, k = self._heads(self.query(x)), self._heads(self.key(x))
        q = q * (1.0 / math.sqrt(q.shape[-1]))
        scores = q @ k.transpose(0, 1, 3, 2)
        return ops.softmax(scores, axis=-1, mask=mask[:, None, None, :])

    def _heads(self, t: Tensor) -> Tensor:
        b, length, dim = t.shape
        return t.reshape(b, length, self.num_heads, dim // self.num_heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mask: np.ndarray, rng=None) -> Tensor:
        b, length, dim = x.shape
        attn = ops.dropout(self.attention_weights(x, mask), self.dropout, rng, self.training)
        ctx = (attn @ self._heads(self.value(x))).transpose(0, 2, 1, 3).reshape(b, length, dim)
        x = self.norm1(x + ops.dropout(self.out(ctx), self.dropout, rng, self.training))
        hidden = self.ff2(ops.relu(self.ff1(x)))
        return self.norm2(x + ops.dropout(hidden, self.dropout, rng, self.training))


class Encoder(Module):
    """Cached vectors + type embedding -> N attention layers -> masked mean -> linear."""

    def __init__(
        self,
        dim: int = 128,
        num_layers: int = 3,
        num_heads: int = 4,
        ff_dim: int = 256,
        dropout: float = 0.1,
        max_len: int = 64,
        use_type: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.max_len = max_len
        self.dtype = np.dtype(dtype)
        self.layers = [AttentionLayer(dim, num_heads, ff_dim, dropout, rng, dtype) for _ in range(num_layers)]
        self.type_table = parameter(trunc_normal(rng, (2, dim), dtype=dtype)) if use_type else None
        self.output = Linear(dim, dim, rng, dtype)
        self.dropout_rng = rng

    def inputs(self, batch: SequenceBatch, cache: RepresentationCache) -> np.ndarray:
        """Gather cached vectors for every position; misses and pads are zero."""
        x = np.zeros(batch.ids.shape + (self.dim,), dtype=np.float32)
        for type_code, kind in _KIND_OF_TYPE.items():
            rows = batch.element_types == type_code
            if rows.any():
                x[rows] = cache.gather(kind, batch.ids[rows])
        return x.astype(self.dtype)

    def __call__(self, batch: SequenceBatch, cache: RepresentationCache) -> Tensor:
        if batch.lengths.max(initial=0) > self.max_len:
            raise ShapeError(f"encode: sequences longer than {self.max_len} positions")
        batch = batch.trimmed()
        x = Tensor(self.inputs(batch, cache))
        if self.type_table is not None:
            types = ops.gather(self.type_table, batch.element_types)
            x = x + types.reshape(len(batch), 1, self.dim)
        for layer in self.layers:
            x = layer(x, batch.mask, self.dropout_rng)
        out = self.output(ops.masked_mean(x, batch.mask))
        nonempty = batch.mask.any(axis=1)
        if not nonempty.all():
            # Entities without history map to the zero vector, like cache misses.
            out = out * nonempty[:, None].astype(self.dtype)
        return out


def encode(batch: SequenceBatch, cache: RepresentationCache, encoder: Encoder, mode: str = "eval") -> Tensor:
    """Encode ``batch`` with ``encoder`` in ``train`` or ``eval`` mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"encode: mode must be 'train' or 'eval', got {mode!r}")
    encoder.train(mode == "train")
    return encoder(batch, cache)
