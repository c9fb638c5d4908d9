# src/utils/config.py
"""
RunConfig and its file format.

Config files are YAML restricted to a flat mapping of dotted keys
(``train.lr0: 0.01``) plus an optional ``include:`` entry (one path or a
list, relative to the including file). Included values are applied first and
the including file overrides them. Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set

import yaml

from src.classes.errors import MissingInputError
from src.classes.nets import ModelConfig
from src.process.evaluate import EvalOptions
from src.process.synthdata import SOURCE_PRESET, TARGET_PRESET, DistributionParams
from src.process.train import TrainConfig
from src.utils.atomic_ops import atomic_writer

INCLUDE_KEY = "include"


class ConfigError(ValueError):
    """Malformed or unknown configuration keys."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_train: int = 200
    n_eval: int = 50
    source: DistributionParams = field(default_factory=lambda: SOURCE_PRESET)
    target: DistributionParams = field(default_factory=lambda: TARGET_PRESET)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalOptions = field(default_factory=EvalOptions)

    def __post_init__(self) -> None:
        if self.n_train <= 0 or self.n_eval <= 0:
            raise ConfigError(f"n_train and n_eval must be positive, got {self.n_train}, {self.n_eval}")

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed drives data generation, initialization and the training streams."""
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value


def flatten(obj: Any, prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            out.update(flatten(value, f"{key}."))
        else:
            out[key] = _plain(value)
    return out


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(current, Enum):
        try:
            return type(current)(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if current:
            template = list(current) if len(current) == len(value) else [current[0]] * len(value)
            return tuple(_coerce(t, v, key) for t, v in zip(template, value))
        return tuple(value)
    return value


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for key, value in flat.items():
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"key {key!r} conflicts with a scalar setting")
        node[parts[-1]] = value
    return tree


def _rebuild(obj: Any, updates: Dict[str, Any], prefix: str) -> Any:
    names = {f.name for f in fields(obj)}
    changes = {}
    for name, value in updates.items():
        key = f"{prefix}{name}"
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{key} is a section; set its fields as {key}.<field>")
            changes[name] = _rebuild(current, value, f"{key}.")
        else:
            if isinstance(value, dict):
                raise ConfigError(f"unknown config key {key}.{next(iter(value))!r}")
            changes[name] = _coerce(current, value, key)
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def apply_overrides(cfg: RunConfig, flat: Dict[str, Any]) -> RunConfig:
    return _rebuild(cfg, _nest(flat), "")


def _read_flat(path: Path, seen: Set[Path]) -> Dict[str, Any]:
    path = Path(path).resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    if not path.exists():
        raise MissingInputError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: a config file must be a mapping of dotted keys")
    includes = data.pop(INCLUDE_KEY, [])
    if isinstance(includes, str):
        includes = [includes]
    merged: Dict[str, Any] = {}
    for include in includes:
        merged.update(_read_flat(path.parent / include, seen | {path}))
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: {key!r} is nested; use flat dotted keys")
        merged[str(key)] = value
    return merged


def load_config(path: Optional[Path], base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    if path is None:
        return cfg
    return apply_overrides(cfg, _read_flat(Path(path), set()))


def dump_config(cfg: RunConfig) -> str:
    header = "# occlupose run configuration (flat dotted keys)\n"
    return header + yaml.safe_dump(flatten(cfg), sort_keys=False, default_flow_style=None)


def save_config(cfg: RunConfig, path: Path) -> Path:
    path = Path(path)
    atomic_writer.atomic_write(path, dump_config(cfg))
    return path


def diff_configs(a: RunConfig, b: RunConfig, ignore: Iterable[str] = ()) -> List[str]:
    fa, fb = flatten(a), flatten(b)
    skip = set(ignore)
    return sorted(k for k in fa if k not in skip and fa[k] != fb.get(k))
