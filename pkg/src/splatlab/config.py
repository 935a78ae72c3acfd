"""Flat key=value configuration for training runs.

The file format is a TOML-compatible scalar subset: one `key = value` pair
per line, # comments, booleans/ints/floats/strings. CLI flags override file
values. Unknown keys and type mismatches are reported by name.
"""

from __future__ import annotations

import hashlib
from dataclasses import fields
from typing import Any, Dict, List, Tuple

from .lfcf import LFCFConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration: unknown key or wrong value type."""


# key -> (section, attribute, type); section '' targets TrainConfig itself.
CONFIG_KEYS: Dict[str, Tuple[str, str, type]] = {
    "iterations": ("", "iterations", int),
    "densify_from": ("", "densify_from", int),
    "densify_until": ("", "densify_until", int),
    "densify_interval": ("", "densify_interval", int),
    "densify_grad_threshold": ("", "densify_grad_threshold", float),
    "densify_size_fraction": ("", "densify_size_fraction", float),
    "opacity_prune": ("", "opacity_prune", float),
    "ssim_weight": ("", "ssim_weight", float),
    "seed": ("", "seed", int),
    "lr_position": ("", "lr_position", float),
    "lr_position_final": ("", "lr_position_final", float),
    "lr_color": ("", "lr_color", float),
    "lr_opacity": ("", "lr_opacity", float),
    "lr_scale": ("", "lr_scale", float),
    "lr_rotation": ("", "lr_rotation", float),
    "max_gaussians": ("", "max_gaussians", int),
    "sh_degree": ("", "sh_degree", int),
    "lowpass_baseline": ("", "lowpass_baseline", bool),
    "lowpass_kappa": ("", "lowpass_kappa", float),
    "lfcf": ("", "lfcf_enabled", bool),
    "init_noise_target": ("", "init_noise_target", str),
    "init_noise_k": ("", "init_noise_k", float),
    "init_noise_seed": ("", "init_noise_seed", int),
    "tau": ("lfcf", "tau", float),
    "epsilon": ("lfcf", "epsilon", float),
    "c_max": ("lfcf", "c_max", float),
    "c_min": ("lfcf", "c_min", float),
    "c_end": ("lfcf", "c_end", float),
    "r": ("lfcf", "every_n_rounds", int),
    "n": ("lfcf", "anneal_exponent", float),
    "depth_strategy": ("lfcf", "depth_strategy", bool),
    "scale_strategy": ("lfcf", "scale_strategy", bool),
    "cadence_strategy": ("lfcf", "cadence_strategy", bool),
    "anneal_strategy": ("lfcf", "anneal_strategy", bool),
    "probabilistic_strategy": ("lfcf", "probabilistic_strategy", bool),
    "anneal_literal": ("lfcf", "anneal_literal", bool),
}


def _parse_scalar(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def parse_config_text(text: str) -> Dict[str, Any]:
    """Parse key=value lines into raw values; no key validation here."""
    out: Dict[str, Any] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = _parse_scalar(value)
    return out


def _coerce(key: str, value: Any, expected: type):
    if expected is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("on", "off"):
            return value.lower() == "on"
        raise ConfigError(f"key {key!r}: expected boolean, got {value!r}")
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {key!r}: expected integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r}: expected number, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"key {key!r}: expected string, got {value!r}")
        return value
    raise ConfigError(f"key {key!r}: unsupported type")


def build_train_config(entries: Dict[str, Any]) -> TrainConfig:
    """Defaults overlaid with validated entries; unknown keys are listed."""
    unknown = sorted(set(entries) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    top: Dict[str, Any] = {}
    sub: Dict[str, Any] = {}
    for key, value in entries.items():
        section, attr, expected = CONFIG_KEYS[key]
        coerced = _coerce(key, value, expected)
        (top if section == "" else sub)[attr] = coerced
    try:
        cfg = TrainConfig(lfcf=LFCFConfig(**sub), **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path=None, overrides: Dict[str, Any] = None) -> TrainConfig:
    """Read a config file (optional) and apply CLI overrides on top."""
    entries: Dict[str, Any] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            entries.update(parse_config_text(fh.read()))
    if overrides:
        entries.update(overrides)
    return build_train_config(entries)


def config_to_entries(cfg: TrainConfig) -> Dict[str, Any]:
    """Flatten a TrainConfig back to the key=value surface."""
    out: Dict[str, Any] = {}
    for key, (section, attr, _) in CONFIG_KEYS.items():
        source = cfg if section == "" else cfg.lfcf
        out[key] = getattr(source, attr)
    return out


def effective_entries(cfg: TrainConfig) -> Dict[str, Any]:
    """Configuration restricted to keys that influence behavior.

    Parameters of disabled features are dropped so that two configs that
    train identically hash identically.
    """
    out = config_to_entries(cfg)
    if not cfg.lfcf_enabled:
        for key, (section, _, _) in CONFIG_KEYS.items():
            if section == "lfcf":
                out.pop(key, None)
    if cfg.init_noise_k == 0.0 or not cfg.init_noise_target:
        out["init_noise_k"] = 0.0
        out.pop("init_noise_target", None)
        out.pop("init_noise_seed", None)
    if not cfg.lowpass_baseline:
        out.pop("lowpass_kappa", None)
    return out


def config_hash(cfg: TrainConfig) -> str:
    entries = effective_entries(cfg)
    text = "\n".join(f"{k}={entries[k]!r}" for k in sorted(entries))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
