"""Run configuration: nested dataclasses, a generated JSON schema, YAML I/O."""

from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .gas import GasConfig
from .net import ModelConfig, TrainConfig
from .projection import ProjectionConfig
from .rdc import RdcConfig
from .weather import SceneConfig


class ConfigError(ValueError):
    pass


@dataclass
class ProjectionSection:
    width: int = 512
    height: int = 32
    fov_up_deg: float = 3.0
    fov_down_deg: float = 25.0

    def build(self) -> ProjectionConfig:
        return ProjectionConfig(self.width, self.height, math.radians(self.fov_up_deg),
                                math.radians(self.fov_down_deg))


@dataclass
class SceneSection:
    train_scenes: int = 64
    eval_scenes: int = 16
    rings: int = 32
    azimuth_steps: int = 1024
    max_range: float = 50.0
    vehicles: list[int] = field(default_factory=lambda: [3, 8])
    poles: list[int] = field(default_factory=lambda: [6, 14])
    walls: list[int] = field(default_factory=lambda: [2, 5])

    def build(self, seed: int, proj: ProjectionSection) -> SceneConfig:
        return SceneConfig(seed=seed, rings=self.rings, azimuth_steps=self.azimuth_steps,
                           max_range=self.max_range, vehicles=tuple(self.vehicles), poles=tuple(self.poles),
                           walls=tuple(self.walls), fov_up=math.radians(proj.fov_up_deg),
                           fov_down=math.radians(proj.fov_down_deg))


@dataclass
class WeatherSection:
    conditions: list[str] = field(default_factory=lambda: ["fog", "rain", "snow"])


@dataclass
class GasSection:
    gamma: float = 0.02
    neg_mean: float = 0.0
    neg_std: float = 1.0
    blocks: int = 2
    negatives: int = 1
    stop_gradient: bool = False


@dataclass
class RdcSection:
    memory_size: int = 64
    temperature: float = 1.0
    sc_weight: float = 1.0
    sa_weight: float = 1.0


@dataclass
class ModelSection:
    channels: int = 32
    num_classes: int = 5
    split_stems: bool = True
    use_ref_branch: bool = True
    use_gas: bool = True
    use_rdc: bool = True
    apply_gas_weight_in_training: bool = True
    gas_loss_weight: float = 1.0
    rdc_loss_weight: float = 1.0
    gas: GasSection = field(default_factory=GasSection)
    rdc: RdcSection = field(default_factory=RdcSection)

    def build(self) -> ModelConfig:
        d = dataclasses.asdict(self)
        d["gas"] = GasConfig(**d["gas"])
        d["rdc"] = RdcConfig(**d["rdc"])
        return ModelConfig(**d)


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 0.0025
    weight_decay: float = 0.0001
    schedule: str = "onecycle"
    warmup_frac: float = 0.3
    precision: str = "float32"
    augment: bool = True

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **dataclasses.asdict(self))


@dataclass
class EvalSection:
    batch_size: int = 4


@dataclass
class SeedSection:
    data: int = 0
    weather: int = 1
    train: int = 0
    ablation: list[int] = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RunConfig:
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    scene: SceneSection = field(default_factory=SceneSection)
    weather: WeatherSection = field(default_factory=WeatherSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    output_dir: str = "runs/default"

    def with_seed(self, seed: int) -> "RunConfig":
        """``--seed`` override: every named stream is offset from ``seed``."""
        return dataclasses.replace(self, seeds=SeedSection(data=seed, weather=seed + 1, train=seed,
                                                           ablation=[seed, seed + 1, seed + 2]))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _json_type(tp) -> dict:
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return schema_for(tp)
    if origin is list:
        (item,) = typing.get_args(tp)
        return {"type": "array", "items": _json_type(item)}
    return {int: {"type": "integer"}, float: {"type": "number"}, bool: {"type": "boolean"},
            str: {"type": "string"}}[tp]


def schema_for(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        prop = _json_type(hints[f.name])
        if f.default is not dataclasses.MISSING:
            prop["default"] = f.default
        elif not dataclasses.is_dataclass(hints[f.name]):
            prop["default"] = f.default_factory()
        props[f.name] = prop
    return {"type": "object", "properties": props, "additionalProperties": False}


def run_config_schema() -> dict:
    s = schema_for(RunConfig)
    s["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    s["title"] = "rangedg run configuration"
    return s


def _build(cls, data: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            kwargs[f.name] = _build(hints[f.name], v) if dataclasses.is_dataclass(hints[f.name]) else v
    return cls(**kwargs)


def from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    try:
        jsonschema.validate(data, run_config_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    cfg = _build(RunConfig, data)
    try:
        cfg.projection.build()
        cfg.model.build()
        cfg.train.build(cfg.seeds.train)
        cfg.scene.build(0, cfg.projection)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config error: {e}") from None
    if cfg.projection.height % 4 or cfg.projection.width % 4:
        raise ConfigError("projection width and height must be divisible by 4")
    unknown = set(cfg.weather.conditions) - {"fog", "rain", "snow"}
    if unknown:
        raise ConfigError(f"unknown weather conditions {sorted(unknown)}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({})
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def schema_json() -> str:
    return json.dumps(run_config_schema(), indent=2) + "\n"


def derive_seed(base: int, *keys) -> int:
    """Stable 32-bit seed for a named purpose."""
    from .net import rng_stream
    return int(rng_stream(base, *keys).integers(0, 2 ** 31 - 1))
