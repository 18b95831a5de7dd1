"""Run configuration: defaults <- flat JSON config file <- CLI flags."""

from __future__ import annotations

import json

from .errors import ConfigError


def merge_config(defaults: dict, config_path=None, overrides: dict = None) -> dict:
    """Layer a flat JSON file and CLI overrides over defaults.

    Unknown keys are rejected, every value must match the default's type
    (ints may widen to floats), and None overrides are ignored so absent
    CLI flags do not clobber file values.
    """
    cfg = dict(defaults)
    if config_path is not None:
        try:
            with open(config_path) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: invalid JSON ({exc})") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{config_path}: config file must hold a flat JSON object")
        _apply(cfg, file_cfg, source=str(config_path))
    if overrides:
        _apply(cfg, {k: v for k, v in overrides.items() if v is not None}, source="flags")
    return cfg


def _apply(cfg: dict, updates: dict, source: str):
    for key, value in updates.items():
        if key not in cfg:
            raise ConfigError(f"{source}: unknown configuration key {key!r}")
        default = cfg[key]
        if default is not None and value is not None:
            if isinstance(default, bool):
                if not isinstance(value, (bool, int)):
                    raise ConfigError(f"{source}: {key} expects a boolean")
                value = bool(value)
            elif isinstance(default, float):
                if not isinstance(value, (int, float)) or isinstance(value, bool):
                    raise ConfigError(f"{source}: {key} expects a number")
                value = float(value)
            elif isinstance(default, int):
                if not isinstance(value, int) or isinstance(value, bool):
                    raise ConfigError(f"{source}: {key} expects an integer")
            elif isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"{source}: {key} expects a string")
        cfg[key] = value
