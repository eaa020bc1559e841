"""Strict flat-JSON config loading shared by the synth and train configs."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


def from_flat_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: config must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {unknown}")
    for k, v in data.items():
        if isinstance(v, (dict, list)):
            raise ConfigError(f"{cls.__name__}: key {k!r} must be a scalar (flat config)")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def load_flat_json(cls, path):
    return from_flat_dict(cls, json.loads(Path(path).read_text()))
