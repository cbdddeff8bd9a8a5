"""Dataclass configs; JSON config files use these field names verbatim."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

REGRESSION_RANGES: tuple[tuple[float, float], ...] = (
    (0.0, 4.0), (4.0, 8.0), (8.0, 16.0), (16.0, 32.0), (32.0, 64.0), (64.0, float("inf")),
)


@dataclass
class ModelConfig:
    input_dim: int = 2304
    text_dim: int = 512
    embed_dim: int = 512
    num_heads: int = 16
    num_blocks: int = 7
    num_downsample: int = 5
    window: int = 19
    text_layers: int = 2
    head_layers: int = 3
    mlp_ratio: int = 4
    norm_eps: float = 1e-5
    fusion_eps: float = 1e-5
    nce_temperature: float = 0.07

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and positive, got {self.window}")
        if not 0 < self.num_downsample < self.num_blocks:
            raise ValueError("need 0 < num_downsample < num_blocks")
        if self.num_levels != len(REGRESSION_RANGES):
            raise ValueError(f"pyramid must have {len(REGRESSION_RANGES)} levels, got {self.num_levels}")
        if self.nce_temperature <= 0:
            raise ValueError("nce_temperature must be positive")

    @property
    def num_levels(self) -> int:
        return self.num_downsample + 1

    @property
    def strides(self) -> list[int]:
        return [2 ** l for l in range(self.num_levels)]

    @property
    def max_stride(self) -> int:
        return 2 ** self.num_downsample


@dataclass
class DecodeConfig:
    score_threshold: float = 1e-3
    pre_nms_topk: int = 2000
    nms_sigma: float = 0.5
    min_score: float = 1e-3
    max_keep: int = 5


@dataclass
class TrainConfig:
    epochs: int = 9
    batch_size: int = 16
    base_lr: float = 1e-3
    warmup_fraction: float = 0.05
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    lambda_reg: float = 1.0
    lambda_nce: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    center_sample: bool = False
    center_radius: float = 1.5
    seed: int = 0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> Config:
        return cls(
            model=_build(ModelConfig, raw.get("model", {})),
            train=_build(TrainConfig, raw.get("train", {})),
            decode=_build(DecodeConfig, raw.get("decode", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> Config:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(kind, raw: dict):
    known = {f.name for f in fields(kind)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**raw)
