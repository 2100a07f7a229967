"""Flat ``key = value`` run configuration: defaults, then file, then command-line flags."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from felrec.model import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce a run; serializes to the same format it reads."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    mode: str = "continue"
    nn: bool = False
    nn_k: int = 10
    workers: int = 1

    def to_text(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in self.train.as_dict().items()]
        for name in ("data", "mode", "nn", "nn_k", "workers"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
RUN_FIELDS = {"data": str, "mode": str, "nn": bool, "nn_k": int, "workers": int}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _field_type(name: str):
    if name in TRAIN_FIELDS:
        return type(getattr(TrainConfig(), name))
    return RUN_FIELDS[name]


def _coerce(name: str, text: str):
    kind = _field_type(name)
    if kind is bool:
        lowered = text.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {text!r}") from None


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TRAIN_FIELDS and key not in RUN_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def resolve(file_path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Merge defaults, the optional config file and explicit overrides (``None`` means unset).

    Without an explicit seed the ``FELREC_SEED`` environment variable is used.
    """
    env = os.environ if env is None else env
    values = read_config_file(file_path) if file_path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    if "seed" not in values and env.get("FELREC_SEED"):
        values["seed"] = _coerce("seed", env["FELREC_SEED"])
    train_values = {k: v for k, v in values.items() if k in TRAIN_FIELDS}
    run_values = {k: v for k, v in values.items() if k in RUN_FIELDS}
    try:
        train = TrainConfig(**train_values).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train=train, **run_values)
