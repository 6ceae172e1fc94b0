"""
Run configuration shared by every management command.

One flat mapping resolved from three sources, later ones winning:
``settings.PAGETRACK`` defaults, an optional YAML file of ``key: value``
lines, and command-line flags. The resolved mapping is written as
``config.yaml`` next to the outputs of each command; feeding that file back
with ``--config`` reproduces the run.
"""

import logging
import os
from collections.abc import Mapping

import yaml
from django.conf import settings

from dataset.generator import GeneratorConfig
from network.config import ModelConfig
from tensorcore.exceptions import ConfigurationError
from training.services import TrainConfig

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"

MODEL_KEYS = (
    "encoder", "base_filters", "depth", "film_blocks", "context_frames", "encoder_channels", "embedding_size",
    "hidden_size",
)
TRAIN_KEYS = (
    "lr", "weight_decay", "batch_size", "seq_len", "lr_patience", "stop_patience", "max_epochs", "min_improvement",
    "tempo_aug", "shift_aug_max", "reverb_aug", "windows_per_piece",
)
GENERATOR_KEYS = ("height", "width", "staves", "notes_per_staff", "notes_per_bar", "ambiguity", "features_only", "reverb")
DATA_KEYS = ("pieces", "val_fraction", "test_fraction")
EVAL_KEYS = ("threshold", "weighted", "mode", "per_piece", "stride")
RUNTIME_KEYS = ("seed", "threads")
# Supplied per invocation, never written to config.yaml.
PATH_KEYS = ("data_dir", "output_dir")


class RunConfigError(ConfigurationError):
    """Unknown keys, nested values or values of the wrong type."""


def default_values():
    pagetrack = settings.PAGETRACK
    model, train, generator = ModelConfig(), TrainConfig(), GeneratorConfig()
    values = {key: getattr(model, key) for key in MODEL_KEYS if key not in ("encoder", "encoder_channels")}
    values["encoder"] = model.encoder_kind
    values["encoder_channels"] = list(model.encoder_channels)
    values.update({key: getattr(train, key) for key in TRAIN_KEYS})
    values.update({key: getattr(generator, key) for key in GENERATOR_KEYS})
    values.update(pieces=16, val_fraction=0.25, test_fraction=0.25)
    values.update(threshold=pagetrack["THRESHOLD"], weighted=True, mode="all", per_piece=False, stride=1)
    values.update(seed=pagetrack["SEED"], threads=pagetrack["THREADS"])
    values.update(data_dir=pagetrack["DATA_DIR"], output_dir=pagetrack["OUTPUT_DIR"])
    return values


def _coerce(key, value, default):
    if isinstance(value, Mapping):
        raise RunConfigError(f"{key}: nested values are not allowed")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, (list, tuple)) and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            return list(value)
    raise RunConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


def coerce_values(values, defaults=None):
    defaults = defaults or default_values()
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise RunConfigError(f"unknown config keys: {', '.join(unknown)}")
    return {key: _coerce(key, value, defaults[key]) for key, value in values.items()}


def read_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise RunConfigError(f"cannot read config file {path}: {e}") from e
    except yaml.YAMLError as e:
        raise RunConfigError(f"{path} is not valid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise RunConfigError(f"{path} must hold key: value lines")
    return data


class RunConfig(Mapping):
    def __init__(self, values):
        self._values = dict(values)

    @classmethod
    def resolve(cls, path=None, **overrides):
        """Defaults < config file < overrides; None overrides are ignored."""
        defaults = default_values()
        values = dict(defaults)
        if path:
            values.update(coerce_values(read_config_file(path), defaults))
        values.update(coerce_values({k: v for k, v in overrides.items() if v is not None}, defaults))
        return cls(values)

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def updated(self, **values):
        return RunConfig({**self._values, **coerce_values(values)})

    def model_config(self):
        values = {key: self[key] for key in MODEL_KEYS if key != "encoder"}
        return ModelConfig(encoder_kind=self["encoder"], **values)

    def train_config(self):
        return TrainConfig(seed=self["seed"], **{key: self[key] for key in TRAIN_KEYS})

    def generator_config(self):
        return GeneratorConfig(**{key: self[key] for key in GENERATOR_KEYS})

    def to_dict(self, paths=False):
        return {k: v for k, v in self._values.items() if paths or k not in PATH_KEYS}

    def write(self, directory):
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, CONFIG_FILE)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)
        logger.debug(f"Wrote resolved config to {path}")
        return path
