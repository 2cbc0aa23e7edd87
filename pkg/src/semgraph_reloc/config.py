"""Run configuration: nested dataclasses with a YAML file representation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from semgraph_reloc.errors import ConfigError

ABLATIONS = ("base", "base+semantic", "full")


@dataclass
class ClusterSection:
    alpha: float = 2.0
    lidar_min_members: int = 5
    image_min_members: int = 50
    connectivity: int = 8
    ignore_classes: list = field(default_factory=lambda: [0])


@dataclass
class PairSection:
    pos_threshold: float = 2.0
    neg_threshold: float = 20.0
    neg_per_pos: float = 1.0


@dataclass
class ModelConfig:
    num_classes: int = 260
    capacity: int = 35
    k: int = 5
    graph_dim: int = 64
    global_dim: int = 128
    map_dim: int = 128
    shared_dim: int = 64
    point_class_dim: int = 8
    image_class_dim: int = 8
    n_points: int = 512
    point_widths: list = field(default_factory=lambda: [32, 64, 64, 128])
    image_widths: list = field(default_factory=lambda: [16, 32])
    range_scale: float = 50.0
    encoder_image_size: list | None = None  # [width, height]; None keeps the native size
    fusion_mode: str = "multiply"
    share_graph_weights: bool = True
    size_weighted_sampling: bool = False

    # fields whose change alters tensor shapes or graph construction
    STRUCTURAL = ("num_classes", "capacity", "k", "graph_dim", "global_dim", "map_dim",
                  "shared_dim", "point_class_dim", "image_class_dim", "n_points",
                  "point_widths", "image_widths",
                  "encoder_image_size", "fusion_mode", "share_graph_weights")

    def structure(self) -> dict:
        return {k: getattr(self, k) for k in self.STRUCTURAL}


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 35
    batch_size: int = 16
    rng_seed: int = 0
    ablation: str = "full"
    beta1: float = 0.9
    beta2: float = 0.999
    decay_every: int = 0  # 0 keeps the rate constant
    decay_gamma: float = 0.5

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")


@dataclass
class SynthSection:
    n_worlds: int = 120
    rng_seed: int = 0
    pos_offset: float = 1.5
    neg_offset: float = 25.0
    negatives: str = "cross_world"
    sequences: list = field(default_factory=lambda: ["00", "02", "05", "06", "07", "08"])


@dataclass
class RunConfig:
    data_root: str = "data"
    output_dir: str = "runs/default"
    rng_seed: int = 0
    cluster: ClusterSection = field(default_factory=ClusterSection)
    pairs: PairSection = field(default_factory=PairSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSection = field(default_factory=SynthSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        return _build(cls, data or {}, "")

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping at the top level")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_yaml(Path(path).read_text())

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_yaml())

    def override(self, dotted: str, raw: str) -> None:
        """Apply ``section.key=value`` with ``value`` parsed as YAML scalar/list."""
        keys = dotted.split(".")
        target: Any = self
        for k in keys[:-1]:
            if not dataclasses.is_dataclass(target) or not hasattr(target, k):
                raise ConfigError(f"unknown config section {dotted!r}")
            target = getattr(target, k)
        leaf = keys[-1]
        if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(target, leaf)
        value = yaml.safe_load(raw) if isinstance(raw, str) else raw
        setattr(target, leaf, _coerce(current, value, dotted))


def _coerce(current, value, where):
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float) and isinstance(value, str):
        # YAML 1.1 reads "3e-4" (no dot) as a string
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, str) and isinstance(value, (str, int, float)):
        return str(value)
    if isinstance(current, list) and isinstance(value, list):
        return value
    raise ConfigError(f"{where}: cannot use {value!r} for a {type(current).__name__} setting")


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(prefix + k for k in unknown)}")
    obj = cls()
    for key, value in data.items():
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            setattr(obj, key, _build(type(current), value, f"{prefix}{key}."))
        else:
            setattr(obj, key, _coerce(current, value, prefix + key))
    return obj
