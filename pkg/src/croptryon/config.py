"""Layered run configuration: defaults < config file < environment < flags.

The file is sectioned key-value text (``[section]`` headers, ``key = value``
lines, ``#`` comments); values are Python/TOML-style literals such as
``0.5``, ``true``, ``"hinge"`` or ``["upper_clothes", "arms"]``. Every
resolved key remembers where its value came from.
"""

from __future__ import annotations

import ast
import configparser
import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .agnostic import AgnosticConfig
from .crop import CropConfig
from .errors import ConfigError
from .networks import NetConfig
from .training import TrainConfig

DATA_ROOT_ENV = "CROPTRYON_DATA_ROOT"

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "data_io": {"root": "", "binarize_mask": True, "sigma": 3.0},
    "agnostic": {"erase_roles": ["upper_clothes", "arms", "neck"], "dilation_px": 8, "fill_value": 0.5},
    "crop": {"scale_lo": 0.5, "scale_hi": 1.0, "ratio_lo": 0.75, "ratio_hi": 4.0 / 3.0,
             "out_h": 512, "out_w": 384, "max_attempts": 10, "include_cloth": False,
             "per_stage": False},
    "net": {"base_channels": 16, "num_labels": 10, "tps_grid": [5, 5], "latent_noise": False,
            "cloth_label": 4},
    # Loss weights left as None take the stage defaults.
    "train": {"epochs": 1, "max_iters": None, "batch_size": 4, "lr": 2e-4, "adv_weight": None,
              "l1_weight": None, "ce_weight": None, "bend_weight": None, "gan_loss": "hinge",
              "seed": 0, "perceptual": False, "perceptual_weights": ""},
    "eval": {"extractor": "handcrafted", "batch_size": 8},
}


def _parse_value(raw: str):
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(section, key, value):
    default = DEFAULTS[section][key]
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, list) and isinstance(value, (list, tuple)):
        return list(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{section}.{key} expects {type(default).__name__}, got {value!r}")
    return value


@dataclass
class RunConfig:
    values: Dict[str, Dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    provenance: Dict[str, str] = field(
        default_factory=lambda: {f"{s}.{k}": "default" for s, keys in DEFAULTS.items() for k in keys})

    def set(self, dotted: str, value, source: str):
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        self.values[section][key] = _coerce(section, key, value)
        self.provenance[dotted] = source

    def get(self, dotted: str):
        section, _, key = dotted.partition(".")
        return self.values[section][key]

    @classmethod
    def load(cls, path: Optional[os.PathLike] = None, overrides: Iterable[str] = (),
             flags: Optional[Dict[str, Any]] = None, env=None) -> "RunConfig":
        """Resolve a config from a file, ``section.key=value`` overrides and
        named flag values (``None`` flag values are ignored)."""
        cfg = cls()
        if path:
            cfg.update_from_file(path)
        env = os.environ if env is None else env
        if env.get(DATA_ROOT_ENV):
            cfg.set("data_io.root", env[DATA_ROOT_ENV], "env")
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            key, raw = item.split("=", 1)
            cfg.set(key.strip(), _parse_value(raw), "flag")
        for key, value in (flags or {}).items():
            if value is not None:
                cfg.set(key, value, "flag")
        return cfg

    def update_from_file(self, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}] in {path}")
            for key, raw in parser.items(section):
                self.set(f"{section}.{key}", _parse_value(raw), "file")

    def resolved(self) -> Dict[str, Dict[str, Any]]:
        return {s: {k: {"value": v, "source": self.provenance[f"{s}.{k}"]} for k, v in keys.items()}
                for s, keys in self.values.items()}

    def crop_config(self) -> CropConfig:
        return CropConfig(**self.values["crop"])

    def agnostic_config(self) -> AgnosticConfig:
        return AgnosticConfig(**self.values["agnostic"])

    def net_config(self) -> NetConfig:
        c = self.values["crop"]
        return NetConfig(image_size=(c["out_h"], c["out_w"]), **self.values["net"])

    def train_config(self, stage: str) -> TrainConfig:
        t = {k: v for k, v in self.values["train"].items() if v is not None}
        return TrainConfig.for_stage(
            stage, sigma=self.values["data_io"]["sigma"], crop=self.crop_config(),
            agnostic=self.agnostic_config(), net=self.net_config(), **t)
