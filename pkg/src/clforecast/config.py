"""Strict run configuration: JSON files, environment overrides and hashing.

A run config mirrors ``TrainConfig``::

    {
      "seed": 0,                      # run seed
      "epochs": 60,                   # maximum epochs (<= 60)
      "batch_size": 32,               # scenarios per optimizer step
      "learning_rate": 0.001,
      "weight_decay": 5e-05,
      "lr_plateau": {"factor": 0.1, "patience": 3, "min_lr": 1e-05},
      "early_stop_patience": 6,       # epochs without improvement, once at min_lr
      "t_sim_steps": 4,               # training rollout length in steps (dt = net.dt s)
      "sim_mask_ratio": 0.5,          # reactive fraction for scene_source = hybrid
      "policy": "on_policy",          # or off_policy
      "scene_source": "hybrid",       # reactive | log_replay | hybrid
      "loss": {"lambda_cls": 1.0, "lambda_reg_ego": 0.4, "lambda_reg_scene": 0.4,
               "lambda_n_base": 0.1, "lambda_det": 1.0, "sigma_min": 0.0001},
      "net": {"hidden_dim": 64, "n_layers": 4, "n_heads": 8, "n_modes": 5, ...},
      "sim": {"detach_between_steps": true, "min_speed_for_heading": 0.1}
    }

Any key may be omitted (defaults apply); unknown keys are errors.
Overrides apply in the order file < environment < flags.  Environment
variables use the prefix ``CLFORECAST_`` with ``__`` between nesting levels,
for example ``CLFORECAST_LOSS__LAMBDA_CLS=0.5``; values are parsed as JSON
when possible and taken as strings otherwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from pathlib import Path
from typing import Any, Mapping

from .losses import LossConfig
from .net import NetConfig
from .sim import SimConfig
from .trainer import PlateauConfig, TrainConfig

ENV_PREFIX = "CLFORECAST_"


class ConfigError(ValueError):
    pass


# the rollout length lives at the top level only
_DERIVED = {SimConfig: {"t_sim_steps"}}


def _check_scalar(v, tp, path):
    if tp is bool:
        ok = isinstance(v, bool)
    elif tp is int:
        ok = isinstance(v, int) and not isinstance(v, bool)
    elif tp is float:
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        v = float(v) if ok else v
    elif tp is str:
        ok = isinstance(v, str)
    else:
        raise ConfigError(f"{path}: unsupported field type {tp}")
    if not ok:
        raise ConfigError(f"{path}: expected {tp.__name__}, got {type(v).__name__} {v!r}")
    return v


def build(cls, data: Mapping[str, Any] | None, path: str = ""):
    """Instantiate a config dataclass from a nested mapping, rejecting unknown keys."""
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(cls, set())
    for k in data:
        if k not in names:
            raise ConfigError(f"unknown config key {path + k!r}")
    kw = {}
    for k, v in data.items():
        tp = hints[k]
        if dataclasses.is_dataclass(tp):
            if not isinstance(v, Mapping):
                raise ConfigError(f"{path + k}: expected an object")
            kw[k] = build(tp, v, f"{path}{k}.")
        else:
            kw[k] = _check_scalar(v, tp, path + k)
    if cls is SimConfig:
        kw.setdefault("t_sim_steps", 1)
    try:
        return cls(**kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path or '<root>'}: {e}") from e


def to_dict(cfg) -> dict:
    """Resolved config as plain data, in the same shape the loader accepts."""
    out = {}
    for f in dataclasses.fields(cfg):
        if f.name in _DERIVED.get(type(cfg), set()):
            continue
        v = getattr(cfg, f.name)
        out[f.name] = to_dict(v) if dataclasses.is_dataclass(v) else v
    return out


def merge(base: dict, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def set_path(d: dict, dotted: str, value) -> dict:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not an object")
    node[keys[-1]] = value
    return d


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or name == ENV_PREFIX + "PURE_PYTHON":
            continue
        dotted = ".".join(p.lower() for p in name[len(ENV_PREFIX):].split("__"))
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        set_path(out, dotted, value)
    return out


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def resolve_train_config(
    path=None, flags: Mapping | None = None, environ: Mapping[str, str] | None = None
) -> TrainConfig:
    data = read_config_file(path) if path else {}
    data = merge(data, env_overrides(environ))
    data = merge(data, flags or {})
    return build(TrainConfig, data)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    if dataclasses.is_dataclass(obj):
        obj = to_dict(obj)
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def run_id_for(digest: str, prefix: str = "run") -> str:
    return f"{prefix}-{digest[:12]}"


__all__ = [
    "ConfigError", "ENV_PREFIX", "LossConfig", "NetConfig", "PlateauConfig", "SimConfig", "TrainConfig",
    "build", "canonical_json", "config_hash", "env_overrides", "merge", "read_config_file",
    "resolve_train_config", "run_id_for", "set_path", "to_dict",
]
