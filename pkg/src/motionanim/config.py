"""Versioned run configuration: YAML on disk, dataclasses in memory, CLI flags on top."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Literal, Mapping

import yaml

from .denoiser import DenoiserConfig
from .guidance import DropoutPolicy, GuidanceScales
from .pipeline import OptimConfig
from .schedule import SamplerConfig

SCHEMA = "motionanim.run/1"
CONFIG_ENV = "MOCA_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    num_train_steps: int = 1000
    base: Literal["linear", "cosine"] = "linear"


@dataclass(frozen=True)
class DataConfig:
    scenes: int = 64
    train_clips: int = 512
    jobs: int = 1


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    checkpoint_every: int = 100
    eval_batch: int = 64
    log_every: int = 50


@dataclass(frozen=True)
class EditConfig:
    candidates: int = 1
    backend: Literal["oracle", "frame-score", "frame-embedding"] = "oracle"
    editor: Literal["recolor", "identity"] = "recolor"
    jobs: int = 1


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "runs/data"
    run_dir: str = "runs/train"
    edits_dir: str = "runs/edits"
    report_dir: str = "runs/report"


@dataclass(frozen=True)
class RunConfig:
    schema: str = SCHEMA
    seed: int = 0
    paths: PathsConfig = PathsConfig()
    data: DataConfig = DataConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    sampler: SamplerConfig = SamplerConfig()
    model: DenoiserConfig = DenoiserConfig()
    optim: OptimConfig = OptimConfig()
    dropout: DropoutPolicy = DropoutPolicy()
    scales: GuidanceScales = GuidanceScales()
    train: TrainConfig = TrainConfig()
    edit: EditConfig = EditConfig()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optim"]["betas"] = list(d["optim"]["betas"])
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def override(self, section: str, **values) -> "RunConfig":
        """Replace non-None values inside one section (flags win over the file)."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section == "":
            return replace(self, **values)
        try:
            return replace(self, **{section: replace(getattr(self, section), **values)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None


def _build(cls, data: Any, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: Mapping) -> RunConfig:
    schema = data.get("schema") if isinstance(data, Mapping) else None
    if schema is None:
        raise ConfigError("config is missing its 'schema' key")
    if schema != SCHEMA:
        raise ConfigError(f"unsupported config schema {schema!r} (expected {SCHEMA!r})")
    return _build(RunConfig, data, "config")


def load_config(path: str | Path | None = None) -> RunConfig:
    """Load ``path``, else ``$MOCA_CONFIG``, else the built-in defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return config_from_dict(data or {})


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(cfg.to_yaml())
