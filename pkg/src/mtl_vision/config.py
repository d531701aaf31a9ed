"""Run configuration: one YAML file covering data, model, augmentation, optimizer and eval."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .augment import AugConfig
from .losses import LossWeights
from .network import ModelConfig
from .trainer import EvalConfig, OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    instances: Optional[str] = None
    stuff: Optional[str] = None
    captions: Optional[str] = None
    image_root: Optional[str] = None
    max_images: Optional[int] = None
    min_freq: int = 5
    index_cache: Optional[str] = None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugConfig = field(default_factory=AugConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "data": DataConfig, "model": ModelConfig, "augment": AugConfig, "optimizer": OptimizerConfig,
    "loss_weights": LossWeights, "train": TrainConfig, "eval": EvalConfig,
}


def _build(cls, values, where: str):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section '{where}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}' section: {exc}") from exc


def config_from_dict(raw: dict, base_dir: Optional[Path] = None) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    top = set(_SECTIONS) | {"output_dir", "seed"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    parts = {name: _build(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(**parts, output_dir=str(raw.get("output_dir", "runs/default")), seed=int(raw.get("seed", 0)))
    if base_dir is not None:
        # relative paths are resolved against the config file's directory
        for key in ("instances", "stuff", "captions", "image_root", "index_cache"):
            v = getattr(cfg.data, key)
            if v is not None and not Path(v).is_absolute():
                setattr(cfg.data, key, str(base_dir / v))
        if not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str(base_dir / cfg.output_dir)
    if cfg.train.max_caption_len > cfg.model.max_caption_len:
        raise ConfigError("train.max_caption_len exceeds model.max_caption_len")
    if cfg.augment.target_size % 32:
        raise ConfigError("augment.target_size must be a multiple of 32")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, path.parent)


def dump_config(cfg: RunConfig) -> str:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=True)
