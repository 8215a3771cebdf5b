"""Flat ``key=value`` run configuration files.

One key per line, ``#`` starts a comment. Model keys: ``num_stages``,
``convs_per_stage``, ``base_channels`` (comma lists), ``width_multiplier``
(rational such as ``1/8``), ``in_channels``, ``fusion_mode``, ``kernel_size``.
Training keys: ``lr``, ``momentum``, ``batch_size``, ``epochs``, ``steps``,
``folds``, ``val_fraction``, ``default_stride`` and ``slice_stride.<dataset_id>``.
``seed`` seeds both initialisation and batching. Keys prefixed ``gradcheck.``
configure the gradient-check command.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

MODEL_KEYS = {"num_stages", "convs_per_stage", "base_channels", "width_multiplier",
              "in_channels", "fusion_mode", "kernel_size"}
TRAIN_KEYS = {"lr", "momentum", "batch_size", "epochs", "steps", "folds", "val_fraction", "default_stride"}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    gradcheck: dict = field(default_factory=dict)


def parse_lines(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _int_list(v):
    return [int(x) for x in v.split(",") if x.strip()]


def build_config(values: dict) -> RunConfig:
    model_kw, train_kw, strides, grad = {}, {}, {}, {}
    try:
        for key, v in values.items():
            if key == "seed":
                model_kw["seed"] = train_kw["seed"] = int(v)
            elif key in ("convs_per_stage", "base_channels"):
                model_kw[key] = _int_list(v)
            elif key == "width_multiplier":
                model_kw[key] = Fraction(v)
            elif key == "fusion_mode":
                model_kw[key] = v
            elif key in MODEL_KEYS:
                model_kw[key] = int(v)
            elif key in ("lr", "momentum", "epochs", "val_fraction"):
                train_kw[key] = float(v)
            elif key in TRAIN_KEYS:
                train_kw[key] = int(v)
            elif key.startswith("slice_stride."):
                strides[key.split(".", 1)[1]] = int(v)
            elif key.startswith("gradcheck."):
                grad[key.split(".", 1)[1]] = float(v)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    except (ValueError, ZeroDivisionError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from None
    model = ModelConfig(**model_kw)
    model.validate()
    train = TrainConfig(slice_stride=strides, **train_kw)
    train.validate()
    return RunConfig(model, train, grad)


def load_config(path) -> RunConfig:
    if path is None:
        return build_config({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return build_config(parse_lines(p.read_text(encoding="utf-8")))
