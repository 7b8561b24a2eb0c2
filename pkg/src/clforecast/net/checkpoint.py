"""Parameter checkpoints as structured text.

The file is JSON: a header (format version, net config, optional metadata)
and, per parameter, its group, shape and a flat list of values.  Floats are
written in shortest round-trip form, so save/load is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import torch

from .decoder import DecoderNet, NetConfig

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(model: DecoderNet, meta: dict | None = None) -> str:
    params = {}
    for name, p in model.state_dict().items():
        t = p.detach().to(torch.float64).contiguous()
        params[name] = {
            "group": name.split(".")[0],
            "shape": list(t.shape),
            "data": t.reshape(-1).tolist(),
        }
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "net": asdict(model.cfg),
        "meta": meta or {},
        "params": params,
    }
    # json writes floats with repr, which round-trips float64 exactly
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def save_checkpoint(model: DecoderNet, path, meta: dict | None = None) -> str:
    text = dumps_checkpoint(model, meta)
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def loads_checkpoint(text: str, expect: NetConfig | None = None) -> tuple[DecoderNet, dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    try:
        cfg = NetConfig(**doc["net"])
    except TypeError as e:
        raise CheckpointError(f"checkpoint net config mismatch: {e}") from e
    if expect is not None and expect != cfg:
        raise CheckpointError("checkpoint net config differs from the requested one")
    model = DecoderNet(cfg)
    state = model.state_dict()
    if set(doc["params"]) != set(state):
        raise CheckpointError("checkpoint parameter names do not match the network")
    new = {}
    for name, entry in doc["params"].items():
        t = torch.tensor(entry["data"], dtype=torch.float64).reshape(entry["shape"])
        if t.shape != state[name].shape:
            raise CheckpointError(f"{name}: shape {tuple(t.shape)} != {tuple(state[name].shape)}")
        new[name] = t
    model.load_state_dict(new)
    return model, doc.get("meta", {})


def load_checkpoint(path, expect: NetConfig | None = None) -> tuple[DecoderNet, dict]:
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"), expect)
