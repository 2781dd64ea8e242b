"""Versioned JSON checkpoints with base64 little-endian binary64 payloads."""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Any

import numpy as np

from trainvar.nn.model import Model, NetworkSpec

FORMAT = "trainvar-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(a: np.ndarray) -> dict[str, Any]:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(d: dict[str, Any]) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if a.size != int(np.prod(d["shape"])):
        raise CheckpointError("parameter payload does not match its shape")
    return a.reshape(d["shape"])


def checkpoint_dict(model: Model, train_config: dict[str, Any] | None = None) -> dict[str, Any]:
    return {
        "format": FORMAT,
        "version": VERSION,
        "spec": model.spec.to_dict(),
        "epoch": model.epoch,
        "train_config": train_config,
        "params": [{k: _encode(v) for k, v in sorted(p.items())} for p in model.params],
    }


def save_checkpoint(path: Path, model: Model, train_config: dict[str, Any] | None = None) -> None:
    text = json.dumps(checkpoint_dict(model, train_config), sort_keys=True, indent=1)
    Path(path).write_text(text + "\n")


def load_checkpoint(path: Path) -> tuple[Model, dict[str, Any] | None]:
    d = json.loads(Path(path).read_text())
    if d.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if d.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {d.get('version')}")
    spec = NetworkSpec.from_dict(d["spec"])
    params = [{k: _decode(v) for k, v in p.items()} for p in d["params"]]
    return Model(spec, params, int(d["epoch"])), d.get("train_config")
