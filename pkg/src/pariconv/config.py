"""INI-style run configuration.

A config file has up to three sections whose keys mirror the command-line
flags (dashes or underscores both accepted)::

    [model]
    variant = pari
    widths = 64, 64, 128, 256
    k = 20

    [train]
    epochs = 60
    lr_max = 0.1

    [data]
    points = 512

Values from the file win over flags, and flags win over built-in defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import fields

from .errors import ParameterError
from .net import ClassifierConfig
from .train import TrainConfig

SECTIONS = ("model", "train", "data")
DATA_KEYS = {"classes": int, "per_class": int, "points": int, "noise": float, "dropout": float, "seed": int}


def _convert(value: str, default):
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value.strip()


def _schema(section):
    if section == "model":
        return {f.name: f.default for f in fields(ClassifierConfig)}
    if section == "train":
        return {f.name: f.default for f in fields(TrainConfig)}
    return {k: t() for k, t in DATA_KEYS.items()}


def read_config(path) -> dict:
    """Parse a config file into ``{section: {key: typed value}}``; unknown keys are errors."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ParameterError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ParameterError(f"{path}: unknown section [{section}]; expected one of {SECTIONS}")
        schema = _schema(section)
        values = {}
        for key, raw in parser.items(section):
            name = key.replace("-", "_")
            if name not in schema:
                raise ParameterError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                values[name] = _convert(raw, schema[name])
            except ValueError:
                raise ParameterError(f"{path}: bad value {raw!r} for {key}") from None
        out[section] = values
    return out


def merge(defaults: dict, flags: dict, file_values: dict) -> dict:
    """Defaults, overridden by explicitly given flags, overridden by the file."""
    out = dict(defaults)
    out.update({k: v for k, v in flags.items() if v is not None})
    out.update(file_values)
    return out
