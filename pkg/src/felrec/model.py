"""Model configuration and assembly of the encoder with its heads."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from felrec.encoder import Encoder
from felrec.heads import NORMS, VARIANTS, Heads
from felrec.numerics.layers import Module


@dataclass
class TrainConfig:
    variant: str = "q"
    dim: int = 128
    num_layers: int = 3
    num_heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.1
    max_len: int = 64
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 1024
    lr: float = 0.01
    momentum: float = 0.9
    tau: float = 0.07
    normalize: bool = False  # unit-length projections before the contrastive dot product
    queue_size: int = 8192
    norm: str = "batch"
    no_mlp: bool = False
    share_mlp: bool = False
    no_type: bool = False
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> TrainConfig:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        positive = ("dim", "num_layers", "num_heads", "ff_dim", "max_len", "epochs", "batch_size", "queue_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.lr <= 0 or self.tau <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr and tau must be positive, momentum in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dim % self.num_heads or (self.variant == "p" and self.dim % 2):
            raise ValueError("dim must be divisible by num_heads (and by 2 for variant p)")
        if self.no_mlp and self.variant == "p":
            raise ValueError("no_mlp applies to variant q only")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes).validate()

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


class FELRec(Module):
    """Shared encoder plus projection (and, for variant p, prediction) MLPs."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        dtype = np.dtype(config.dtype)
        self.encoder = Encoder(
            dim=config.dim,
            num_layers=config.num_layers,
            num_heads=config.num_heads,
            ff_dim=config.ff_dim,
            dropout=config.dropout,
            max_len=config.max_len,
            use_type=not config.no_type,
            rng=rng,
            dtype=dtype,
        )
        self.heads = Heads(
            config.variant,
            config.dim,
            rng,
            norm=config.norm,
            share_mlp=config.share_mlp,
            no_mlp=config.no_mlp,
            dtype=dtype,
        )

    def parameter_counts(self) -> dict[str, int]:
        """Trainable parameter count per component; aliased tensors count once."""
        enc = self.encoder
        counts = {
            "encoder layers": sum(layer.num_parameters() for layer in enc.layers),
            "type embedding": 0 if enc.type_table is None else enc.type_table.size,
            "output linear": enc.output.num_parameters(),
        }
        seen: set[int] = set()
        for name in ("g_user", "g_item", "h_user", "h_item"):
            mlp = getattr(self.heads, name)
            if mlp is None:
                continue
            fresh = [p for p in mlp.parameters() if id(p) not in seen]
            seen.update(id(p) for p in fresh)
            counts[name] = sum(p.size for p in fresh)
        counts["total"] = self.num_parameters()
        return counts
