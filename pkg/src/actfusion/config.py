"""Run configuration.

A config file is JSON (``.json``) or YAML (``.yaml``/``.yml``) with the
top-level keys ``schema_version``, ``data``, ``grouper``, ``backbone``, ``model``,
``fusion``, ``train``, ``eval`` and ``ablation``; every key is optional and
missing values take the defaults below. Unknown keys are rejected so typos
fail loudly. See the README for the full key list.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_classes: int = 8
    videos_per_class: int = 40
    frames: int = 60
    channels: int = 3
    height: int = 32
    width: int = 32
    lag: int = 5
    signature_width: int = 5
    patch_size: int = 8
    amplitude: float = 1.0
    noise: float = 0.3
    confusable_pairs: int = 2
    distractors: int = 1
    distractor_prob: float = 0.5
    distractor_lags: list[int] = field(default_factory=lambda: [10, -5])
    margin: int = 10
    test_fraction: float = 0.25
    seed: int = 0


@dataclass
class GrouperConfig:
    fraction: float = 0.125
    iterations: int = 300
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    channels: list[int] = field(default_factory=lambda: [8, 16])
    per_stream: bool = True
    inclusion: str = "replace"  # or "append"
    seed: int = 0


@dataclass
class BackboneConfig:
    iterations: int = 300  # 0 disables the warm start
    batch_size: int = 16
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0


@dataclass
class ModelConfig:
    stage_channels: list[int] = field(default_factory=lambda: [8, 16, 16, 32, 32])
    side_stages: list[int] = field(default_factory=lambda: [3, 4, 5])
    granularities: int = 3
    group_sizes: list[int] = field(default_factory=lambda: [5, 3, 1])
    feature_dim: int = 64
    hidden: int = 64
    fc1_relu: bool = True
    alphas: list[float] = field(default_factory=lambda: [0.1, 0.1, 1.0])
    beta: float = 2.0


@dataclass
class FusionConfig:
    delta: int = 5
    anchor: str = "center"  # or "left"
    hidden: int = 64
    fuser_channels: int = 1
    share_fusers: bool = False
    gamma: float = 2.0
    predict: str = "last"  # or "mean" over unit heads


@dataclass
class TrainConfig:
    mode: str = "co2fi_asyn5"
    batch_size: int = 16
    momentum: float = 0.9
    lr: float = 0.05
    lr_decay: float = 0.1
    decay_interval: int = 600
    iterations: int = 800
    eval_every: int = 0
    fusion_stop_grad: bool = False
    seed: int = 0


@dataclass
class EvalConfig:
    periods: int = 12


@dataclass
class AblationConfig:
    modes: list[str] = field(default_factory=lambda: [
        "baseline", "co2fi_no_grouping", "co2fi_two_granularities", "co2fi_no_coarseness",
        "co2fi_complete", "baseline_syn", "baseline_asyn1", "baseline_asyn5", "co2fi_asyn5",
    ])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    grouper: GrouperConfig = field(default_factory=GrouperConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    schema_version: int = CONFIG_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "Config":
        """Copy with section fields overridden, e.g. ``cfg.replace(train={"iterations": 10})``."""
        d = self.to_dict()
        for sec, updates in sections.items():
            if sec not in d or not isinstance(d[sec], dict):
                raise ConfigError(f"unknown config section {sec!r}")
            d[sec].update(updates)
        return from_dict(d)


_SECTIONS = {
    "data": DataConfig,
    "grouper": GrouperConfig,
    "backbone": BackboneConfig,
    "model": ModelConfig,
    "fusion": FusionConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**raw)


def from_dict(raw: dict | None) -> Config:
    raw = dict(raw or {})
    version = raw.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    cfg = Config(**{k: _build(cls, raw.get(k), k) for k, cls in _SECTIONS.items()})
    validate(cfg)
    return cfg


def load_config(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        raw = json.loads(text)
    else:
        raw = yaml.safe_load(text)
    return from_dict(raw)


def validate(cfg: Config) -> None:
    d, m, f, t = cfg.data, cfg.model, cfg.fusion, cfg.train
    if d.n_classes < 2:
        raise ConfigError("data.n_classes must be >= 2")
    if d.lag >= d.frames - d.signature_width:
        raise ConfigError("data.lag must be < frames - signature_width")
    if not 0 <= d.distractor_prob <= 1:
        raise ConfigError("data.distractor_prob must lie in [0, 1]")
    if not 0 < cfg.grouper.fraction <= 1:
        raise ConfigError("grouper.fraction must lie in (0, 1]")
    if cfg.grouper.inclusion not in ("replace", "append"):
        raise ConfigError("grouper.inclusion must be 'replace' or 'append'")
    if m.granularities not in (1, 2, 3):
        raise ConfigError("model.granularities must be 1, 2 or 3")
    if len(m.alphas) != 3 or len(m.group_sizes) != 3:
        raise ConfigError("model.alphas and model.group_sizes need three entries (coarse to fine)")
    if not m.side_stages or any(not 1 <= s <= len(m.stage_channels) for s in m.side_stages):
        raise ConfigError("model.side_stages must name existing stages")
    if f.anchor not in ("center", "left"):
        raise ConfigError("fusion.anchor must be 'center' or 'left'")
    if f.predict not in ("last", "mean"):
        raise ConfigError("fusion.predict must be 'last' or 'mean'")
    if f.delta < 0:
        raise ConfigError("fusion.delta must be >= 0")
    if t.decay_interval <= 0:
        raise ConfigError("train.decay_interval must be positive")
    if t.batch_size < 1 or t.iterations < 1:
        raise ConfigError("train.batch_size and train.iterations must be positive")
