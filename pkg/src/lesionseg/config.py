"""Model, training and run configuration.

All configuration objects are plain dataclasses validated on construction, so
an invalid combination fails before any tensor is allocated.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

NUM_STAGES = 5
UNIFIED_DIM = 64


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


def _as_tuple(value, cast=int) -> tuple:
    if isinstance(value, str):
        value = [v for v in value.replace(",", " ").split() if v]
    return tuple(cast(v) for v in value)


@dataclass(frozen=True)
class ModelConfig:
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 128, 256)
    decoder_channels: Tuple[int, ...] = (16, 32, 64, 64, 64)
    input_size: Tuple[int, int] = (64, 64)
    kernel_size: int = 1
    heads: int = 8
    esa_stages: Tuple[int, ...] = (3, 4, 5)
    lca_stages: Tuple[int, ...] = (2, 3, 4)
    use_dk: bool = True
    use_esa: bool = True
    use_lca: bool = True
    # "sigmoid" gates each pixel by its similarity to the lesion token;
    # "softmax" is the literal single-key softmax (weight identically 1).
    lca_mode: str = "sigmoid"
    # Divide the lesion sum by the total lesion weight. The plain sum grows with
    # the pixel count and makes the kernel update diverge when training from scratch.
    lesion_average: bool = True
    ffn_expansion: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("encoder_channels", "decoder_channels", "esa_stages", "lca_stages", "input_size"):
            object.__setattr__(self, name, _as_tuple(getattr(self, name)))
        if len(self.encoder_channels) != NUM_STAGES or min(self.encoder_channels) < 1:
            raise ConfigError(f"encoder_channels must be {NUM_STAGES} positive integers, got {self.encoder_channels}")
        if len(self.decoder_channels) != NUM_STAGES or min(self.decoder_channels) < 1:
            raise ConfigError(f"decoder_channels must be {NUM_STAGES} positive integers, got {self.decoder_channels}")
        if len(self.input_size) != 2:
            raise ConfigError(f"input_size must be (H, W), got {self.input_size}")
        check_input_size(self.input_size)
        if self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if not set(self.esa_stages) <= {1, 2, 3, 4, 5}:
            raise ConfigError(f"esa_stages must be a subset of 1..5, got {self.esa_stages}")
        if not set(self.lca_stages) <= {1, 2, 3, 4}:
            raise ConfigError(f"lca_stages must be a subset of 1..4, got {self.lca_stages}")
        if self.lca_mode not in ("sigmoid", "softmax"):
            raise ConfigError(f"lca_mode must be 'sigmoid' or 'softmax', got {self.lca_mode!r}")
        if self.ffn_expansion < 1:
            raise ConfigError("ffn_expansion must be >= 1")
        if self.use_esa:
            for s in self.esa_stages:
                c = self.encoder_channels[s - 1]
                if c % self.heads:
                    raise ConfigError(f"heads={self.heads} does not divide ESA stage {s} width {c}")
        if self.use_lca:
            for s in self.lca_stages:
                c = self.decoder_channels[s - 1]
                if c % self.heads:
                    raise ConfigError(f"heads={self.heads} does not divide LCA stage {s} width {c}")

    def with_flags(self, use_dk: bool, use_esa: bool, use_lca: bool) -> "ModelConfig":
        return dataclasses.replace(self, use_dk=use_dk, use_esa=use_esa, use_lca=use_lca)

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


def check_input_size(size) -> None:
    """Raise ConfigError unless both spatial dims are positive multiples of 32."""
    step = 2 ** NUM_STAGES
    for name, dim in zip(("height", "width"), size):
        if dim < step or dim % step:
            raise ConfigError(f"input {name} {dim} is not a positive multiple of {step}")


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 0.001
    power: float = 0.9
    n_epoch: int = 20
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    dice_smooth: float = 1.0
    augment: bool = True
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "split", _as_tuple(self.split, float))
        for name in ("lr_init", "power", "n_epoch", "batch_size", "dice_smooth"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.power > 1:
            raise ConfigError(f"power must lie in (0, 1], got {self.power}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must be three non-negative ratios summing to 1, got {self.split}")

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_RUN_KEYS = {"data", "out", "checkpoint", "threshold", "synth_seed"}


@dataclass
class RunConfig:
    """Everything a CLI command needs, merged from a flat config file and flags."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: Optional[str] = None
    out: str = "runs"
    checkpoint: Optional[str] = None
    threshold: float = 0.5
    synth_seed: int = 1234

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        unknown = set(values) - _MODEL_KEYS - _TRAIN_KEYS - _RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig(**{k: v for k, v in values.items() if k in _MODEL_KEYS})
        train = TrainConfig(**{k: v for k, v in values.items() if k in _TRAIN_KEYS})
        run = {k: v for k, v in values.items() if k in _RUN_KEYS}
        return cls(model=model, train=train, **run)

    def to_dict(self) -> Dict[str, Any]:
        out = {**self.model.to_dict(), **self.train.to_dict()}
        out.update(data=self.data, out=self.out, checkpoint=self.checkpoint,
                   threshold=self.threshold, synth_seed=self.synth_seed)
        return out

    def echo(self) -> Dict[str, Any]:
        """Configuration without output/checkpoint locations, for embedding in reports."""
        out = self.to_dict()
        del out["out"], out["checkpoint"]
        return out


def read_config_file(path) -> Dict[str, Any]:
    """Read a flat key-value document: JSON object, or ``key = value`` lines.

    Values in the line format are parsed as JSON when possible (so ``true``,
    ``[1, 2]`` and numbers work), otherwise kept as strings.
    """
    text = Path(path).read_text()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        values = json.loads(text)
    else:
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            try:
                values[key] = json.loads(raw)
            except json.JSONDecodeError:
                values[key] = raw
    if not isinstance(values, dict) or any(isinstance(v, dict) for v in values.values()):
        raise ConfigError(f"{path}: config must be a flat key-value mapping")
    return values
