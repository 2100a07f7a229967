"""Chronological training loop, validation, best-checkpoint selection and persistence."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from felrec.cache import ITEM, USER, RepresentationCache
from felrec.evaluator import StreamState, evaluate_stream
from felrec.heads import Queues, loss_p, loss_q
from felrec.model import FELRec, TrainConfig
from felrec.numerics.optim import OptimizerState, ScheduleConfig, cosine_lr, sgd_step
from felrec.pipeline import HistoryStore, InteractionStream, batch_stream

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FELK"
CKPT_VERSION = 1


class NonFiniteLossError(ArithmeticError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss in epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass
class EpochStats:
    epoch: int
    loss: float
    batches: int
    lr: float


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer_step: int
    momentum: dict[str, np.ndarray]
    cache_bytes: bytes
    epoch: int
    val_rank: float
    curve: list[tuple[int, float, float]] = field(default_factory=list)

    def build_model(self) -> FELRec:
        model = FELRec(self.config)
        load_state(model, self.params, self.buffers)
        return model

    def cache(self) -> RepresentationCache:
        cache = RepresentationCache(self.config.dim)
        cache.load_bytes(self.cache_bytes)
        return cache

    def optimizer_state(self) -> OptimizerState:
        state = OptimizerState(self.config.lr, self.config.momentum, self.optimizer_step)
        state.buffers = {k: v.copy() for k, v in self.momentum.items()}
        return state


def model_state(model: FELRec) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    buffers = {name: b.copy() for name, b in model.named_buffers()}
    return params, buffers


def load_state(model: FELRec, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    own_buffers = dict(model.named_buffers())
    if set(own) != set(params) or set(own_buffers) != set(buffers):
        raise CheckpointError("checkpoint tensors do not match the model architecture")
    for name, p in own.items():
        if p.data.shape != params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {p.data.shape} vs {params[name].shape}")
        p.data[...] = params[name]
    for name, b in own_buffers.items():
        b[...] = buffers[name]


class Trainer:
    """Owns the model, the cache, the negative queues and the optimizer state."""

    def __init__(self, config: TrainConfig, model: FELRec | None = None):
        self.config = config.validate()
        self.model = model if model is not None else FELRec(config)
        self.cache = RepresentationCache(config.dim)
        self.queues = Queues(config.queue_size, self.model.heads.out_dim, np.dtype(config.dtype))
        self.state = OptimizerState(config.lr, config.momentum)
        self.histories = HistoryStore(config.max_len)
        self.schedule: ScheduleConfig | None = None
        self.curve: list[tuple[int, float, float]] = []

    def _schedule_for(self, train: InteractionStream) -> ScheduleConfig:
        steps = max(1, math.ceil(len(train) / self.config.batch_size))
        return ScheduleConfig(self.config.epochs, self.config.warmup_epochs, steps, self.config.lr)

    def train_step(self, batch: InteractionStream, epoch: int = 0, index: int = 0) -> float:
        """Encode, compute the loss, update parameters, then write representations back."""
        cfg = self.config
        model = self.model
        model.train()
        seqs = self.histories.sequences(batch.users.tolist(), batch.items.tolist())
        reps = model.encoder(seqs, self.cache)
        n = len(batch)
        u_repr, x_repr = reps[:n], reps[n:]
        if cfg.variant == "q":
            loss, _, _ = loss_q(u_repr, x_repr, model.heads, self.queues, cfg.tau, normalize=cfg.normalize)
        else:
            loss, _, _ = loss_p(u_repr, x_repr, model.heads)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(epoch, index)
        model.zero_grad()
        if loss.requires_grad:
            loss.backward()
        params = dict(model.named_parameters())
        grads = {name: p.grad for name, p in params.items()}
        schedule = self.schedule or self._schedule_for(batch)
        sgd_step(params, grads, self.state, cosine_lr(self.state.step + 1, schedule))
        self.cache.put_many(USER, batch.users, reps.data[:n])
        self.cache.put_many(ITEM, batch.items, reps.data[n:])
        self.histories.extend(batch)
        return value

    def train_epoch(self, train: InteractionStream, epoch: int = 0) -> EpochStats:
        """One chronological pass starting from an empty cache, queues and history."""
        if self.schedule is None:
            self.schedule = self._schedule_for(train)
        self.cache.clear()
        self.queues.clear()
        self.histories = HistoryStore(self.config.max_len)
        losses = [self.train_step(b, epoch, i) for i, b in enumerate(batch_stream(train, self.config.batch_size))]
        lr = cosine_lr(self.state.step, self.schedule)
        return EpochStats(epoch, float(np.mean(losses)) if losses else float("nan"), len(losses), lr)

    def post_training_state(self, train: InteractionStream) -> StreamState:
        """Evaluator state right after the training stream (shares nothing with the trainer)."""
        return StreamState.from_log(self.cache.clone(), train, self.config.max_len)

    def validate(self, train: InteractionStream, validation: InteractionStream) -> float:
        """Mean normalized rank on ``validation`` using a throwaway copy of the cache."""
        state = self.post_training_state(train)
        result = evaluate_stream(
            validation, None, self.model.encoder, state,
            batch_size=self.config.batch_size, compute_hr=False,
        )
        return result.report.total.rank

    def checkpoint(self, epoch: int, val_rank: float) -> Checkpoint:
        params, buffers = model_state(self.model)
        return Checkpoint(
            config=self.config,
            params=params,
            buffers=buffers,
            optimizer_step=self.state.step,
            momentum={k: v.copy() for k, v in self.state.buffers.items()},
            cache_bytes=self.cache.to_bytes(),
            epoch=epoch,
            val_rank=val_rank,
            curve=list(self.curve),
        )

    def restore(self, ckpt: Checkpoint) -> None:
        load_state(self.model, ckpt.params, ckpt.buffers)
        self.state = ckpt.optimizer_state()
        self.cache = ckpt.cache()

    def fit(self, train: InteractionStream, validation: InteractionStream) -> Checkpoint:
        """Train for ``epochs`` epochs and return (and restore) the best-validating checkpoint."""
        self.schedule = self._schedule_for(train)
        best: Checkpoint | None = None
        for epoch in range(self.config.epochs):
            stats = self.train_epoch(train, epoch)
            val_rank = self.validate(train, validation)
            self.curve.append((epoch, stats.loss, val_rank))
            log.info("epoch %d loss %.4f val rank %.4f lr %.5f", epoch, stats.loss, val_rank, stats.lr)
            if best is None or val_rank < best.val_rank:
                best = self.checkpoint(epoch, val_rank)
        best.curve = list(self.curve)
        self.restore(best)
        return best


# -- checkpoint files ---------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, version, JSON header, raw arrays, cache snapshot."""
    arrays = (
        [("param", k, v) for k, v in ckpt.params.items()]
        + [("buffer", k, v) for k, v in ckpt.buffers.items()]
        + [("momentum", k, v) for k, v in ckpt.momentum.items()]
    )
    header = {
        "config": ckpt.config.as_dict(),
        "epoch": ckpt.epoch,
        "val_rank": ckpt.val_rank,
        "optimizer_step": ckpt.optimizer_step,
        "curve": ckpt.curve,
        "arrays": [{"kind": kind, "name": k, "dtype": v.dtype.str, "shape": list(v.shape)} for kind, k, v in arrays],
        "cache_bytes": len(ckpt.cache_bytes),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for _, _, v in arrays:
        buf.write(np.ascontiguousarray(v).tobytes())
    buf.write(ckpt.cache_bytes)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, config: TrainConfig | None = None) -> Checkpoint:
    """Read a checkpoint; if ``config`` is given its variant and dimensions must match."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<IQ")
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    saved = TrainConfig(**header["config"])
    if config is not None:
        if config.variant != saved.variant:
            raise CheckpointError(f"checkpoint variant {saved.variant!r} does not match requested {config.variant!r}")
        if config.dim != saved.dim:
            raise CheckpointError(f"checkpoint dimension {saved.dim} does not match requested {config.dim}")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "momentum": {}}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(spec["shape"]).copy()
        pos += count * dtype.itemsize
        groups[spec["kind"]][spec["name"]] = arr
    cache_bytes = data[pos : pos + header["cache_bytes"]]
    if len(cache_bytes) != header["cache_bytes"]:
        raise CheckpointError(f"{path}: truncated cache snapshot")
    return Checkpoint(
        config=saved,
        params=groups["param"],
        buffers=groups["buffer"],
        optimizer_step=header["optimizer_step"],
        momentum=groups["momentum"],
        cache_bytes=bytes(cache_bytes),
        epoch=header["epoch"],
        val_rank=header["val_rank"],
        curve=[tuple(row) for row in header["curve"]],
    )
