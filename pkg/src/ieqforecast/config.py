"""Run configuration: one JSON document, every key optional, CLI overrides on top."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .models import ModelSpec
from .pipeline import CHANNELS, DEFAULT_SCHEMA
from .synthdata import SynthConfig
from .training import TrainConfig

WORKDIR_ENV = "IEQ_WORKDIR"


@dataclass(frozen=True)
class PathsConfig:
    input_csv: str | None = None
    workdir: str = field(default_factory=lambda: os.environ.get(WORKDIR_ENV, "ieq_work"))


@dataclass(frozen=True)
class PipelineConfig:
    schema: dict = field(default_factory=lambda: dict(DEFAULT_SCHEMA))
    max_gap_steps: int = 6
    min_segment_length: int = 13
    window: int = 12
    horizon: int = 1
    split: tuple = (0.85, 0.075, 0.075)
    utc_offset_seconds: int = 0


@dataclass(frozen=True)
class ModelConfig:
    family: str = "gru"
    hidden_size: int = 64
    conv_filters: int = 32
    conv_kernel: int = 3


@dataclass(frozen=True)
class SeedsConfig:
    model: int = 0
    shuffle: int = 0
    synth: int = 0


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"shuffle_seed"}
_SYNTH_KEYS = {f.name for f in fields(SynthConfig)} - {"seed"}


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    def model_spec(self, family: str | None = None) -> ModelSpec:
        m = self.model
        return ModelSpec(family or m.family, input_features=7, hidden_size=m.hidden_size,
                         conv_filters=m.conv_filters, conv_kernel=m.conv_kernel, seed=self.seeds.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.training, shuffle_seed=self.seeds.shuffle)

    def synth_config(self) -> SynthConfig:
        opts = dict(self.synth)
        if "occupied_hours" in opts:
            opts["occupied_hours"] = tuple(opts["occupied_hours"])
        return SynthConfig(**opts, seed=self.seeds.synth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pipeline"]["split"] = list(self.pipeline.split)
        return d


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**data)


def _checked_keys(data, allowed, name):
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return dict(data)


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    pipeline = dict(data.get("pipeline", {}))
    if "schema" in pipeline:
        pipeline["schema"] = {**DEFAULT_SCHEMA, **pipeline["schema"]}
    if "split" in pipeline:
        pipeline["split"] = tuple(pipeline["split"])
    cfg = RunConfig(
        paths=_section(PathsConfig, data.get("paths", {}), "paths"),
        pipeline=_section(PipelineConfig, pipeline, "pipeline"),
        model=_section(ModelConfig, data.get("model", {}), "model"),
        training=_checked_keys(data.get("training", {}), _TRAIN_KEYS, "training"),
        synth=_checked_keys(data.get("synth", {}), _SYNTH_KEYS, "synth"),
        seeds=_section(SeedsConfig, data.get("seeds", {}), "seeds"),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    split = cfg.pipeline.split
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"pipeline.split must be three fractions summing to 1, got {list(split)}")
    missing = [k for k in ("timestamp", *CHANNELS) if k not in cfg.pipeline.schema]
    if missing:
        raise ConfigError(f"pipeline.schema lacks {missing}")
    if cfg.paths.input_csv is not None and not Path(cfg.paths.input_csv).is_file():
        raise ConfigError(f"paths.input_csv does not exist: {cfg.paths.input_csv}")
    try:
        cfg.model_spec()
        cfg.train_config()
        cfg.synth_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value``; the value is JSON if it parses, else a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load(path=None, overrides=()) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    for item in overrides:
        keys, value = parse_override(item)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return from_dict(data)


def with_workdir(cfg: RunConfig, workdir) -> RunConfig:
    return replace(cfg, paths=replace(cfg.paths, workdir=str(workdir)))
