"""Run configuration: a YAML file with one mapping per section.

Every key has a default (see ``DEFAULTS``); unknown sections or keys are
rejected, and all violations are reported together.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path

import yaml

from .neural import NetConfig, TrainConfig
from .optics import MicroscopeConfig

PHANTOM_KINDS = ("chromatin", "sphere", "two_point", "gratings", "csv")


def _dataclass_defaults(cls, skip=()):
    return {f.name: f.default for f in fields(cls) if f.init and f.name not in skip}


DEFAULTS = {
    "seed": 0,
    "phantom": {
        "kind": "chromatin",
        "count": 10,
        "fill_field": False,
        # chromatin
        "n_steps": 400,
        "step_nm": 60.0,
        "persistence": 0.8,
        "emitters_per_step": 2,
        "box_nm": [16000.0, 16000.0, 4000.0],
        # sphere
        "radius_nm": 5000.0,
        "n_points": 1000,
        # two_point / gratings
        "dz_nm": 900.0,
        "n_planes": 3,
        "size_um": 1.0,
        "density_per_um2": 10000.0,
        # csv
        "csv_path": None,
        "unit_scale": 1.0,
    },
    "optics": _dataclass_defaults(MicroscopeConfig),
    "illumination": {"beta": 0.9, "angle": 0.0},
    "recon": {"wiener_w": 1e-3, "apodization": "triangle"},
    "net": _dataclass_defaults(NetConfig),
    "train": _dataclass_defaults(TrainConfig, skip=("seed",)),
    "noise": {
        "photons_per_emitter": None,
        "levels": [8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0],
    },
    "metrology": {"padding_factor": 4},
    "paths": {
        "phantom": "phantom.csv",
        "raw": "raw.stk",
        "widefield": "widefield.stk",
        "hr": "hr.stk",
        "sim": "sim.stk",
        "net": "net.stk",
        "dataset": "dataset",
        "params": "model.params",
    },
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _type_ok(default, value):
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    return isinstance(value, type(default))


def merge(base: dict, overrides: dict, problems: list, where="") -> dict:
    out = copy.deepcopy(base)
    for key, value in (overrides or {}).items():
        path = f"{where}{key}"
        if key not in base:
            problems.append(f"unknown key '{path}'")
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                problems.append(f"'{path}' must be a mapping")
                continue
            out[key] = merge(base[key], value, problems, path + ".")
        elif not _type_ok(base[key], value):
            problems.append(f"'{path}' has type {type(value).__name__}, expected {type(base[key]).__name__}")
        else:
            out[key] = value
    return out


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate(cfg: dict, problems: list):
    if cfg["phantom"]["kind"] not in PHANTOM_KINDS:
        problems.append(f"'phantom.kind' must be one of {', '.join(PHANTOM_KINDS)}")
    if cfg["phantom"]["kind"] == "csv" and not cfg["phantom"]["csv_path"]:
        problems.append("'phantom.csv_path' is required for kind 'csv'")
    if cfg["phantom"]["count"] < 1:
        problems.append("'phantom.count' must be >= 1")
    for section, cls in (("optics", MicroscopeConfig), ("net", NetConfig)):
        try:
            cls(**cfg[section])
        except (TypeError, ValueError) as exc:
            problems.append(f"'{section}': {exc}")
    try:
        TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as exc:
        problems.append(f"'train': {exc}")
    if cfg["recon"]["wiener_w"] <= 0:
        problems.append("'recon.wiener_w' must be positive")
    if cfg["recon"]["apodization"] not in ("none", "triangle"):
        problems.append("'recon.apodization' must be 'none' or 'triangle'")
    if not 0 < cfg["illumination"]["beta"] < 1:
        problems.append("'illumination.beta' must lie in (0, 1)")
    photons = cfg["noise"]["photons_per_emitter"]
    if photons is not None and photons <= 0:
        problems.append("'noise.photons_per_emitter' must be positive")
    levels = cfg["noise"]["levels"]
    if not levels or not all(_is_number(v) and v > 0 for v in levels):
        problems.append("'noise.levels' must be a non-empty list of positive numbers")
    box = cfg["phantom"]["box_nm"]
    if len(box) != 3 or not all(_is_number(v) and v > 0 for v in box):
        problems.append("'phantom.box_nm' must be three positive numbers")
    if cfg["metrology"]["padding_factor"] < 0:
        problems.append("'metrology.padding_factor' must be >= 0")


def parse_assignment(text: str) -> dict:
    """``'optics.camera_px=32'`` -> ``{'optics': {'camera_px': 32}}`` (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError([f"override '{text}' is not of the form section.key=value"])
    dotted, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    node: dict = {}
    root = node
    parts = dotted.split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return root


def _deep_update(a: dict, b: dict):
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(a.get(k), dict):
            _deep_update(a[k], v)
        else:
            a[k] = v


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Resolve defaults, the YAML file, ``section.key=value`` overrides and ``--seed``."""
    problems: list[str] = []
    user: dict = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
        if not isinstance(user, dict):
            raise ConfigError([f"config {path} must be a mapping of sections"])
    for text in overrides:
        _deep_update(user, parse_assignment(text))
    if seed is not None:
        user["seed"] = seed
    # rejected keys fall back to defaults, so the rest can still be checked
    cfg = merge(DEFAULTS, user, problems)
    _validate(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
