"""Run configuration: one JSON document with model/train/data sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError

SCHEDULES = ("contrastive-scratch", "pretrain-then-text", "hybrid-finetune")
DECAYS = ("cosine", "linear")


def _from_keys(cls, section: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**section)


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 3          # dense layers per tower
    width: int = 64         # hidden width
    embed_dim: int = 16
    num_classes: int = 8

    def __post_init__(self):
        if min(self.depth, self.width, self.embed_dim, self.num_classes) < 1:
            raise ConfigError("model sizes must be >= 1")


@dataclass(frozen=True)
class TrainSection:
    schedule: str = "contrastive-scratch"
    batch_size: int = 64
    microbatch_img: int = 16
    microbatch_txt: int = 16
    replicas: int = 1
    steps: int = 200
    warmup: int = 20
    lr_peak: float = 0.02
    lr_min: float = 0.002
    decay: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.01
    temperature: float = 0.1
    variance_correction: bool = False
    precision_emulation: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.decay not in DECAYS:
            raise ConfigError(f"decay must be one of {DECAYS}")
        if min(self.batch_size, self.microbatch_img, self.microbatch_txt,
               self.replicas, self.steps) < 1:
            raise ConfigError("batch/microbatch/replicas/steps must be >= 1")
        if self.warmup < 0 or self.warmup > self.steps:
            raise ConfigError("warmup must lie in [0, steps]")
        if self.lr_peak <= 0.0 or self.lr_min < 0.0 or self.lr_min > self.lr_peak:
            raise ConfigError("need lr_peak > 0 and 0 <= lr_min <= lr_peak")
        if self.temperature <= 0.0:
            raise ConfigError("temperature must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay must be >= 0")
        if self.variance_correction and self.replicas < 2:
            raise ConfigError("variance_correction needs replicas >= 2")


@dataclass(frozen=True)
class DataSection:
    classes: int = 8
    size: int = 1024
    input_dim: int = 16
    noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2 or self.size < self.classes:
            raise ConfigError("need classes >= 2 and size >= classes")
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.noise < 0.0:
            raise ConfigError("noise must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        unknown = set(doc) - {"model", "train", "data"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            model=_from_keys(ModelConfig, doc.get("model", {}), "model"),
            train=_from_keys(TrainSection, doc.get("train", {}), "train"),
            data=_from_keys(DataSection, doc.get("data", {}), "data"),
        )

    @classmethod
    def from_json(cls, path: str) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def with_train(self, **kwargs) -> "TrainConfig":
        return replace(self, train=replace(self.train, **kwargs))
