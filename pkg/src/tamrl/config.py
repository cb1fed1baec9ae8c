"""Experiment manifests: flat ``section.key: value`` YAML with a closed key set.

Nested YAML mappings are accepted and flattened to dotted keys. Any key not
listed in :data:`DEFAULTS` is rejected, so a typo never silently falls back
to a default.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .errors import ConfigError

# desk-scale synthetic defaults; the real-data presets live in configs/
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "dataset.kind": "synthetic",  # synthetic | series
    "dataset.path": "",
    "dataset.test_fraction": 0.2,
    "dataset.budgets": [],
    "schema.timestamp": "timestamp",
    "schema.drivers": [],
    "schema.response": "",
    "window.length": 30,
    "window.stride": 15,
    "support.fraction": 0.5,
    "support.windows": 1,
    "synth.set": "SET1",
    "synth.train_tasks_per_mode": 3000,
    "synth.eval_tasks_per_mode": 300,
    "synth.k_support": 5,
    "synth.k_query": 5,
    "synth.noise_std": 0.3,
    "model.kind": "mlp",  # mlp | lstm
    "model.base_hidden": 100,
    "model.base_layers": 4,
    "model.input_width": 0,  # lstm f_d width; 0 means base_hidden
    "model.encoder_hidden": 40,
    "train.pretrain_epochs": 20,
    "train.joint_epochs": 40,
    "train.lr": 0.001,
    "train.batch_size": 64,
    "train.pretrain_batch_size": 256,
    "train.query_windows": 1,
    "adapt.steps": 5,
    "adapt.lr": 0.001,
    "fomaml.inner_steps": 5,
    "fomaml.inner_lr": 0.003,
    "fomaml.epochs": 40,
    "fomaml.meta_batch": 32,
    "ensemble.size": 5,
}

# keys that determine trained weights; checkpoints are tied to these
MODEL_SECTIONS = ("seed", "dataset.", "schema.", "window.", "support.", "synth.", "model.", "train.", "fomaml.")


def _flatten(d: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, list):
            if isinstance(value, (str, int, float)):
                value = [value]
            return list(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"config key {key!r}: cannot use {value!r} (expected {type(default).__name__})")


def _hash(items: Iterable[tuple[str, Any]]) -> str:
    blob = json.dumps(sorted(items), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ExperimentConfig(Mapping):
    """Resolved experiment configuration (defaults + manifest + overrides)."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = dict(DEFAULTS)
        for k, v in _flatten(values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
        self._values = merged

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def section(self, name: str) -> dict[str, Any]:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self._values.items() if k.startswith(pre)}

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        vals = dict(self._values)
        vals.update(_flatten(overrides))
        return ExperimentConfig(vals)

    def hash(self) -> str:
        return _hash(self._values.items())

    def model_hash(self) -> str:
        return _hash((k, v) for k, v in self._values.items() if k.startswith(MODEL_SECTIONS))

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else ""


def read_manifest(path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: manifest must be a key-value mapping")
    cfg = ExperimentConfig(data)
    return cfg.with_overrides(overrides) if overrides else cfg


def write_manifest(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.as_dict(), sort_keys=True))
