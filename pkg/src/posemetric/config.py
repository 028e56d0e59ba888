"""Configuration dataclasses and their JSON (de)serialization."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

LOSS_VARIANTS = ("ContrastivePose", "FixedContrastive", "TripletDynamic")


@dataclass
class LossConfig:
    margin: float = 1.0
    pose_threshold: float = math.radians(5.0)
    variant: str = "ContrastivePose"

    def __post_init__(self):
        if self.margin <= 0 or self.pose_threshold <= 0:
            raise ValueError("margin and pose_threshold must be positive")
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")


@dataclass
class SamplerConfig:
    batch_size: int = 32
    neighbor_count: int = 1
    neighbor_threshold: float = math.radians(5.0)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 1 <= self.neighbor_count < self.batch_size:
            raise ValueError("neighbor_count must be in [1, batch_size)")


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 32
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    weight_decay: float = 5e-4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    beta_train: float = 0.1
    s_occ: float = 0.5
    # appearance augmentation stand-ins
    jitter_sigma: float = 0.05
    flip_prob: float = 0.5
    # architecture
    hidden: tuple = (64, 64)
    backbone_out: int = 32
    head_hidden: tuple = (32,)
    embed_dim: int = 16
    excluded_occluder: str = "car"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.head_hidden = tuple(self.head_hidden)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_backbone < 0 or self.lr_head < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be nonnegative")
        if not 0.0 <= self.beta_train <= 1.0 or not 0.0 <= self.s_occ <= 1.0:
            raise ValueError("beta_train and s_occ must lie in [0, 1]")
        if self.sampler.batch_size != self.batch_size:
            self.sampler = dataclasses.replace(self.sampler, batch_size=self.batch_size)

    def digest(self) -> str:
        return config_hash(self)


@dataclass
class DataConfig:
    seed: int = 0
    n_samples: int = 2000
    categories: tuple = ("car",)
    subcategory_mix: dict = field(default_factory=lambda: {"sedan": 0.75, "van": 0.25})
    noise_sigma: float = 0.02
    feature_dim: int = 16
    pose_prior: str = "natural"
    shared_maps: bool = False

    def __post_init__(self):
        self.categories = tuple(self.categories)


@dataclass
class EvalConfig:
    n_queries: int = 500
    seed: int = 1
    levels: tuple = ("L0",)
    beta_tests: tuple = (0.0,)
    reference_design: str = "TrainDB"
    backend: str = "kdtree"

    def __post_init__(self):
        self.levels = tuple(self.levels)
        self.beta_tests = tuple(float(b) for b in self.beta_tests)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def to_dict(obj) -> dict:
    def convert(v):
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        return v

    return {k: convert(v) for k, v in dataclasses.asdict(obj).items()}


def _build(cls, raw: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    nested = {"loss": LossConfig, "sampler": SamplerConfig, "data": DataConfig, "train": TrainConfig, "eval": EvalConfig}
    kwargs = {}
    for key, value in raw.items():
        if key in nested and isinstance(value, dict):
            value = _build(nested[key], value)
        kwargs[key] = value
    return cls(**kwargs)


def train_config_from_dict(raw: dict) -> TrainConfig:
    return _build(TrainConfig, raw)


def run_config_from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw)


def load_run_config(path) -> RunConfig:
    return run_config_from_dict(json.loads(Path(path).read_text()))


def config_hash(obj) -> str:
    payload = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def desk_run_config() -> RunConfig:
    """The pinned desk-scale setup: 2 000 samples, one category, two subcategories.

    Shorter schedule and milder occluders than the library defaults so that a
    single CPU finishes a run in well under a minute.
    """
    return RunConfig(DataConfig(), TrainConfig(epochs=200, s_occ=0.25), EvalConfig())
