"""Run configuration: one YAML key tree, strictly validated.

Unknown keys are rejected with their dotted path, values are type checked
against the dataclass schema, and command-line overrides (``section.key=value``)
are applied before validation so every run is described by config plus
overrides alone.
"""

from __future__ import annotations

import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .cvae import MeshCvaeConfig
from .training import TrainingConfig

CACHE_ENV_VAR = "CAUSALMESH_CACHE"


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, wrong type, bad value)."""


@dataclass
class TemplateConfig:
    subdivisions: int = 2


@dataclass
class DataConfig:
    dir: str = "data/cohort"
    n_train: int = 2000
    n_val: int = 250
    n_test: int = 500

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")


@dataclass
class ModelConfig:
    latent_dim: int = 32
    cheb_order: int = 10
    pool_factor: float = 2.0
    encoder_channels: tuple = (32, 64, 128)
    spline_bins: int = 8

    def cvae_config(self) -> MeshCvaeConfig:
        return MeshCvaeConfig(
            latent_dim=self.latent_dim,
            cheb_order=self.cheb_order,
            pool_factor=self.pool_factor,
            encoder_channels=tuple(self.encoder_channels),
        )


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    template: TemplateConfig = field(default_factory=TemplateConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)


def _coerce(hint, value, path: str):
    if is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"config key {path} must be a mapping")
        return _build(hint, value, path)
    origin = typing.get_origin(hint)
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {path} must be a list")
        return tuple(_coerce(int, v, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path} must be a number")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path} must be an integer")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {path} must be a string")
        return value
    raise ConfigError(f"config key {path} has unsupported schema type {hint}")


def _build(dc_cls, data: dict, path: str):
    hints = typing.get_type_hints(dc_cls)
    known = {f.name: hints[f.name] for f in fields(dc_cls)}
    for key in data:
        if key not in known:
            dotted = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {dotted}")
    kwargs = {}
    for name, hint in known.items():
        if name in data:
            dotted = f"{path}.{name}" if path else name
            kwargs[name] = _coerce(hint, data[name], dotted)
    try:
        return dc_cls(**kwargs)
    except ValueError as err:
        raise ConfigError(f"invalid config section {path or '<root>'}: {err}") from err


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings onto the raw key tree."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw_value = item.partition("=")
        keys = dotted.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty key component")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as err:
            raise ConfigError(f"override {item!r} has an unparsable value: {err}") from err
        node = raw
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r} descends into non-mapping key {key!r}")
            node = child
        node[keys[-1]] = value
    return raw


def config_from_dict(raw: dict, overrides=()) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = apply_overrides(dict(raw), overrides)
    return _build(RunConfig, raw, "")


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"config file {path} is not valid YAML: {err}") from err
    if raw is None:
        raw = {}
    return config_from_dict(raw, overrides)


def cache_dir() -> Path:
    """Artifact cache location, overridable through the environment."""
    root = os.environ.get(CACHE_ENV_VAR)
    if root:
        return Path(root).expanduser()
    return Path("~/.cache/causalmesh").expanduser()
