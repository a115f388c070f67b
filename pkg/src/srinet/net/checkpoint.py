"""Versioned plain-text checkpoints: config, named parameter arrays with
shapes, and optimizer state. JSON keeps float64 values exactly via repr
round-tripping, so a resumed run continues bit-identically."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import InvalidInputError
from .model import Model, ModelConfig

FORMAT = "srinet-checkpoint"
VERSION = 1


def _pack(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _unpack(entry: dict) -> np.ndarray:
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def save_checkpoint(path, model: Model, opt_state: dict | None = None,
                    epoch: int | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "config": asdict(model.config),
        "epoch": epoch,
        "params": {k: _pack(v) for k, v in model.params.items()},
    }
    if opt_state is not None:
        doc["optimizer"] = {
            "t": opt_state["t"],
            "m": {k: _pack(v) for k, v in opt_state["m"].items()},
            "v": {k: _pack(v) for k, v in opt_state["v"].items()},
        }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Returns (model, optimizer state or None, epoch or None)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise InvalidInputError(f"{path} is not a model checkpoint")
    if doc.get("version") != VERSION:
        raise InvalidInputError(
            f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig(**doc["config"])
    params = {k: _unpack(v) for k, v in doc["params"].items()}
    model = Model(config, params)
    opt_state = None
    if "optimizer" in doc:
        opt = doc["optimizer"]
        opt_state = {
            "t": opt["t"],
            "m": {k: _unpack(v) for k, v in opt["m"].items()},
            "v": {k: _unpack(v) for k, v in opt["v"].items()},
        }
    return model, opt_state, doc.get("epoch")
