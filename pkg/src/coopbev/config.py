"""Experiment configuration: nested blocks, YAML round-trip, stable hashing.

Unknown keys are rejected with the offending paths listed, and every
run artifact is stamped with the 16-hex-char config hash so results can
be traced back to the exact configuration that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError
from .scene import SceneConfig

PRESETS = ("desk", "paper-scale")


@dataclass
class GridConfig:
    h: int = 128
    w: int = 64
    resolution: float = 1.0


@dataclass
class FusionConfig:
    reduce: str = "conv"          # conv | mean | max
    layers: int = 2               # weight-net conv layers, 1-3
    kernel: int = 3               # weight-net kernel size, 1/3/5
    complementary: bool = True    # weight the neighbor map by 1-M


@dataclass
class ModelConfig:
    extractor_channels: tuple[int, ...] = (32, 64, 64, 64)
    extractor_strides: tuple[int, ...] = (1, 2, 1, 1)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    anchor_w: float = 2.0
    anchor_l: float = 4.5
    score_threshold: float = 0.3
    nms_iou: float = 0.15
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    dtype: str = "float32"

    @property
    def feature_channels(self) -> int:
        return self.extractor_channels[-1]

    @property
    def feature_stride(self) -> int:
        return int(np.prod(self.extractor_strides))

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class TrainConfig:
    n_scenes: int = 400
    epochs: int = 8
    learning_rate: float = 1e-3
    lr_decay: str = "cosine"      # cosine | none; cosine anneals to 5% of base
    loss_balance: float = 0.5     # weight on the individual-branch loss


@dataclass
class ChannelConfig:
    drop_prob: float = 0.0
    base_latency_ms: float = 10.0
    jitter_ms: float = 5.0
    deadline_ms: float = 100.0
    comm_range: float = 32.0


@dataclass
class EvalConfig:
    n_scenes: int = 100


@dataclass
class AblateConfig:
    n_scenes: int = 100
    epochs: int = 2
    n_eval_scenes: int = 30


def _occlusion_heavy_scene() -> SceneConfig:
    return SceneConfig(n_objects=(12, 16), min_hidden_objects=2)


@dataclass
class ExperimentConfig:
    preset: str = "desk"
    master_seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    eval_scene: SceneConfig = field(default_factory=_occlusion_heavy_scene)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}, expected one of {PRESETS}")
        stride = self.model.feature_stride
        if self.grid.h % stride or self.grid.w % stride:
            raise ConfigError(
                f"grid {self.grid.h}x{self.grid.w} must be divisible by the "
                f"extractor stride product {stride}")
        if len(self.model.extractor_channels) != len(self.model.extractor_strides):
            raise ConfigError("extractor_channels and extractor_strides differ in length")
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.model.dtype!r}")
        if self.model.fusion.reduce not in ("conv", "mean", "max"):
            raise ConfigError(f"fusion.reduce must be conv/mean/max, got {self.model.fusion.reduce!r}")
        if self.model.fusion.layers not in (1, 2, 3):
            raise ConfigError(f"fusion.layers must be 1-3, got {self.model.fusion.layers}")
        if self.model.fusion.kernel not in (1, 3, 5):
            raise ConfigError(f"fusion.kernel must be 1/3/5, got {self.model.fusion.kernel}")
        if not 0.0 <= self.channel.drop_prob <= 1.0:
            raise ConfigError(f"drop_prob must be in [0,1], got {self.channel.drop_prob}")
        if self.channel.deadline_ms <= 0:
            raise ConfigError(f"deadline_ms must be positive, got {self.channel.deadline_ms}")
        if not 0.0 <= self.train.loss_balance <= 1.0:
            raise ConfigError(f"loss_balance must be in [0,1], got {self.train.loss_balance}")
        if self.train.epochs < 1 or self.ablate.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.train.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"lr_decay must be cosine or none, got {self.train.lr_decay!r}")


def default_config(preset: str = "desk") -> ExperimentConfig:
    cfg = ExperimentConfig()
    if preset == "desk":
        return cfg
    if preset == "paper-scale":
        cfg.preset = "paper-scale"
        cfg.grid = GridConfig(h=352, w=100, resolution=0.8)
        cfg.model.extractor_channels = (64, 128, 256, 256)
        cfg.channel.comm_range = 70.0
        cfg.scene.x_range = (-130.0, 130.0)
        cfg.scene.y_range = (-36.0, 36.0)
        cfg.scene.radius_range = (8.0, 120.0)
        cfg.scene.sender_distance = (15.0, 60.0)
        cfg.eval_scene.x_range = cfg.scene.x_range
        cfg.eval_scene.y_range = cfg.scene.y_range
        cfg.eval_scene.radius_range = cfg.scene.radius_range
        cfg.eval_scene.sender_distance = cfg.scene.sender_distance
        return cfg
    raise ConfigError(f"unknown preset {preset!r}, expected one of {PRESETS}")


# -- dict / file round-trip ----------------------------------------------------

def to_dict(cfg) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _field_default(f):
    if f.default_factory is not MISSING:  # type: ignore[comparison-overlap]
        return f.default_factory()
    if f.default is not MISSING:
        return f.default
    return None


def from_dict(cls, d: dict, path: str = ""):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping at {path or '<root>'}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        where = path or "<root>"
        raise ConfigError(f"unknown config keys under {where}: {unknown}")
    kwargs = {}
    for name, f in known.items():
        if name not in d:
            continue
        default = _field_default(f)
        value = d[name]
        sub_path = f"{path}{name}"
        if is_dataclass(default):
            kwargs[name] = from_dict(type(default), value, sub_path + ".")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub_path} must be a list, got {type(value).__name__}")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = _deep_merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def load_config(path: str | Path | None = None, preset: str = "desk",
                seed: int | None = None) -> ExperimentConfig:
    """Build a config from preset defaults, optional YAML overrides, and seed."""
    base = to_dict(default_config(preset))
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh) or {}
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"could not parse config file {path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        if loaded.get("preset", preset) != preset and "preset" in loaded:
            base = to_dict(default_config(loaded["preset"]))
        base = _deep_merge(base, loaded)
    cfg = from_dict(ExperimentConfig, base)
    if seed is not None:
        cfg.master_seed = int(seed)
    cfg.validate()
    return cfg


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=False)


def config_hash(cfg: ExperimentConfig) -> str:
    payload = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]
