"""Run configuration: a YAML key-value tree layered over built-in defaults.

Precedence is command-line flag > config file > default.  Unknown keys are
rejected before any work starts.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import BgMomentError, ConfigError
from .model import ModelConfig
from .training import LossWeights, TrainConfig

OUTPUT_ENV = "BGMOMENT_OUTPUT_DIR"


@dataclass
class DataConfig:
    root: str = "data"
    train_split: str = "train"
    eval_split: str = "test"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"model": ModelConfig, "loss": LossWeights, "train": TrainConfig, "data": DataConfig}


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    if value is None or default is None:
        return value
    want = type(default)
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected true/false, got {value!r}")
        return value
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        return float(value)
    if want is str:
        return str(value)
    return value


def _build(section: str, cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")
    base = cls()
    kwargs = {k: _coerce(section, k, v, getattr(base, k)) for k, v in values.items()}
    merged = {**{k: getattr(base, k) for k in known}, **kwargs}
    try:
        return cls(**merged)
    except BgMomentError as exc:
        raise ConfigError(str(exc)) from None


def load_tree(path) -> dict:
    try:
        tree = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise ConfigError(f"config {path}: top level must be a mapping")
    return tree


def merge_overrides(tree: dict, overrides: dict[str, Any]) -> dict:
    """Apply dotted-key overrides (``"train.lr": 1e-3``) on top of a tree."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in tree.items()}
    for key, value in overrides.items():
        if value is None:
            continue
        head, _, tail = key.partition(".")
        if tail:
            sub = out.setdefault(head, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{head}: expected a mapping")
            sub[tail] = value
        else:
            out[head] = value
    return out


def build_config(tree: dict) -> RunConfig:
    allowed = set(_SECTIONS) | {"seed", "output_dir"}
    unknown = sorted(set(tree) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = tree.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = dict(tree.get(name) or {})
        # the run seed feeds every component unless a section sets its own
        if name in ("model", "train") and "seed" not in values:
            values["seed"] = seed
        sections[name] = _build(name, cls, values)
    out = tree.get("output_dir") or default_output_dir()
    return RunConfig(seed=seed, output_dir=str(out), **sections)


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    tree = load_tree(path) if path else {}
    return build_config(merge_overrides(tree, overrides or {}))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
