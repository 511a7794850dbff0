"""Configuration records and strict dict/JSON loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .exceptions import ConfigurationError
from .moe import STRATEGIES, ExpertConfig


def _from_dict(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{section}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigurationError(f"{section}.{key}: unknown key")
    return cls(**data)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    latent_dim: int | None = None  # r; defaults to d_model // 2
    attention: str = "mla"
    ffn: str = "moe"
    experts: ExpertConfig = field(default_factory=lambda: ExpertConfig(16, 2, 4))
    d_ff: int | None = None  # dense FFN width; defaults to 4 * d_model
    dropout: float = 0.1
    max_seq: int = 256
    rope_base: float = 10000.0
    seed: int = 0
    precision: str = "single"
    init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.experts, dict):
            object.__setattr__(self, "experts", _from_dict(ExpertConfig, self.experts, "model.experts"))
        if self.latent_dim is None:
            object.__setattr__(self, "latent_dim", self.d_model // 2)
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.vocab_size <= 0 or self.d_model <= 0 or self.n_layers <= 0 or self.n_heads <= 0:
            raise ConfigurationError("vocab_size, d_model, n_layers and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ConfigurationError(f"head dim {self.head_dim} must be even for rotary embeddings")
        if not 0 < self.latent_dim <= self.d_model:
            raise ConfigurationError(f"latent_dim must lie in (0, d_model], got {self.latent_dim}")
        if self.attention not in ("mla", "mha"):
            raise ConfigurationError(f"model.attention must be 'mla' or 'mha', got {self.attention!r}")
        if self.ffn not in ("moe", "dense"):
            raise ConfigurationError(f"model.ffn must be 'moe' or 'dense', got {self.ffn!r}")
        if self.precision not in ("single", "double"):
            raise ConfigurationError(f"model.precision must be 'single' or 'double', got {self.precision!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"model.dropout must lie in [0, 1), got {self.dropout}")
        if self.max_seq <= 0:
            raise ConfigurationError("model.max_seq must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def compression_ratio(self) -> Fraction:
        return Fraction(self.latent_dim, self.d_model)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.precision == "single" else np.float64)

    @property
    def expert_hidden(self) -> int:
        return self.experts.hidden(self.d_model)

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        return _from_dict(cls, data, "model")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    seq_len: int = 64
    lr_peak: float = 3e-4
    lr_floor: float = 1e-5
    warmup_fraction: float = 0.10
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    balancing: str = "bias-diff"
    gamma: float = 1e-3
    alpha: float = 0.01
    checkpoint_every: int = 0
    val_fraction: float = 0.1
    cv_window: int = 50

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigurationError("train.steps must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigurationError(f"train.warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.clip_norm <= 0:
            raise ConfigurationError(f"train.clip_norm must be positive, got {self.clip_norm}")
        if self.balancing not in STRATEGIES:
            raise ConfigurationError(f"train.balancing must be one of {STRATEGIES}, got {self.balancing!r}")
        if self.batch_size <= 0 or self.seq_len <= 0:
            raise ConfigurationError("train.batch_size and train.seq_len must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError(f"train.val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.cv_window <= 0:
            raise ConfigurationError("train.cv_window must be positive")

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.steps)))

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        return _from_dict(cls, data, "train")


@dataclass(frozen=True)
class Paths:
    corpus: str | None = None
    out_dir: str | None = None
    metrics_file: str = "metrics.jsonl"

    @classmethod
    def from_dict(cls, data: dict) -> Paths:
        return _from_dict(cls, data, "paths")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigurationError("config root must be a JSON object")
        for key in data:
            if key not in ("model", "train", "paths"):
                raise ConfigurationError(f"{key}: unknown key")
        return cls(
            ModelConfig.from_dict(data.get("model", {})),
            TrainConfig.from_dict(data.get("train", {})),
            Paths.from_dict(data.get("paths", {})),
        )

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "paths": dataclasses.asdict(self.paths)}
