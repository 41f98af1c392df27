"""JSON configuration loading for training and experiments."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from . import experiments as ex
from .errors import ValidationError
from .training import TrainConfig


def _coerce(base, overrides: dict, where: str):
    clean = {}
    for key, value in overrides.items():
        if not hasattr(base, key):
            raise ValidationError(f"unknown config field '{key}' at {where}/{key}")
        current = getattr(base, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        clean[key] = value
    return dataclasses.replace(base, **clean)


def load_train_config(path_or_dict) -> TrainConfig:
    doc = path_or_dict
    if not isinstance(doc, dict):
        with open(path_or_dict) as fh:
            doc = json.load(fh)
    return _coerce(TrainConfig(), doc, "")


def load_experiment_overrides(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError("experiment config must be a JSON object")
    return doc


def dump_defaults(path=None) -> str:
    """Reference document with every config field and its default."""
    doc = {
        "train": dataclasses.asdict(TrainConfig()),
        "experiments": {name: dataclasses.asdict(cfg_type())
                        for name, cfg_type in ex.CONFIG_TYPES.items()},
    }
    text = json.dumps(doc, sort_keys=True, indent=1)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text
