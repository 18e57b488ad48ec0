"""Checkpoint files: a JSON header line, then float64 little-endian payload.

Payload order: trainable parameters, batch-norm running statistics, then the
Adam first and second moments (same order as the parameters) when present.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import CipsModel, ModelConfig, param_shapes, state_shapes

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, model: CipsModel) -> "OptimizerState":
        return cls(0, {k: np.zeros_like(v) for k, v in model.params.items()},
                   {k: np.zeros_like(v) for k, v in model.params.items()})


def checkpoint_bytes(model: CipsModel, optimizer: Optional[OptimizerState] = None) -> bytes:
    pshapes, sshapes = param_shapes(model.config), state_shapes(model.config)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "layers": [{"name": n, "shape": list(s)} for n, s in pshapes.items()],
        "state": [{"name": n, "shape": list(s)} for n, s in sshapes.items()],
        "bn_updates": model.bn_updates,
        "optimizer": None if optimizer is None else {"name": "adam", "step": optimizer.step},
        "endian": "little",
        "dtype": "f64",
    }
    arrays = [model.params[n] for n in pshapes] + [model.state[n] for n in sshapes]
    if optimizer is not None:
        arrays += [optimizer.m[n] for n in pshapes] + [optimizer.v[n] for n in pshapes]
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return (json.dumps(header, separators=(",", ":")) + "\n").encode() + payload


def checkpoint_from_bytes(buf: bytes) -> tuple[CipsModel, Optional[OptimizerState]]:
    nl = buf.find(b"\n")
    try:
        header = json.loads(buf[:nl].decode()) if nl >= 0 else None
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if not isinstance(header, dict):
        raise CheckpointError("checkpoint header is missing or not valid JSON")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')!r} unsupported")
    try:
        cfg = ModelConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from None
    pshapes, sshapes = param_shapes(cfg), state_shapes(cfg)
    declared = [(d["name"], tuple(d["shape"])) for d in header.get("layers", [])]
    if declared != list(pshapes.items()):
        raise CheckpointError("checkpoint layer list does not match its model config")
    names = list(pshapes) + list(sshapes)
    shapes = list(pshapes.values()) + list(sshapes.values())
    opt = header.get("optimizer")
    if opt is not None:
        names += [("m", n) for n in pshapes] + [("v", n) for n in pshapes]
        shapes += list(pshapes.values()) * 2
    total = sum(int(np.prod(s)) for s in shapes)
    raw = buf[nl + 1:]
    if len(raw) != total * 8:
        raise CheckpointError(f"payload has {len(raw)} bytes, header implies {total * 8}")
    flat = np.frombuffer(raw, dtype="<f8")
    values, pos = {}, 0
    for name, shape in zip(names, shapes):
        size = int(np.prod(shape))
        values[name] = flat[pos:pos + size].reshape(shape).astype(np.float64)
        pos += size
    model = CipsModel(cfg, {n: values[n] for n in pshapes}, {n: values[n] for n in sshapes},
                      header.get("bn_updates", 0))
    optimizer = None
    if opt is not None:
        optimizer = OptimizerState(int(opt["step"]), {n: values[("m", n)] for n in pshapes},
                                   {n: values[("v", n)] for n in pshapes})
    return model, optimizer


def save_checkpoint(path, model: CipsModel, optimizer: Optional[OptimizerState] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, optimizer))


def load_checkpoint(path) -> tuple[CipsModel, Optional[OptimizerState]]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
