"""YAML run configuration with typed blocks and field-path error messages."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import PhantomConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataBlock:
    dir: str = "data"
    n_paired: int = 200
    n_weak: int = 400
    n_val: int = 50
    workers: int = 1


@dataclass(frozen=True)
class PhaseBlock:
    epochs: int = 40
    learning_rate: float = 1e-4
    batch_size: int = 8
    weight_decay: float = 1e-4
    max_steps: Optional[int] = None


@dataclass(frozen=True)
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs"
    attention: bool = True
    inject: bool = True
    data: DataBlock = field(default_factory=DataBlock)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    phase1: PhaseBlock = field(default_factory=lambda: PhaseBlock(40, 1e-4))
    phase2: PhaseBlock = field(default_factory=lambda: PhaseBlock(20, 1e-5))
    full_mtl: PhaseBlock = field(default_factory=lambda: PhaseBlock(60, 1e-4))
    regression: PhaseBlock = field(default_factory=lambda: PhaseBlock(20, 1e-4))

    def __post_init__(self):
        if self.profile not in ("toy", "full"):
            raise ConfigError(f"profile: expected 'toy' or 'full', got {self.profile!r}")


def _coerce(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, raw: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{path + '.' if path else ''}{key}: unknown field")
    kwargs = {k: _coerce(v, hints[k], f"{path + '.' if path else ''}{k}") for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or cls.__name__}: {e}") from e


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def from_dict(raw: dict) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return _build(RunConfig, raw)


def to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from e
    return from_dict(raw)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text())
