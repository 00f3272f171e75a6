"""Checkpoints: a JSON header next to an ``.npz`` parameter blob."""
from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ..core_types import ValidationError
from ..dataset import atomic_write_bytes, atomic_write_json
from .net import NetConfig, RegionNet

CHECKPOINT_SCHEMA = 1


def config_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    header: dict[str, Any]
    state: dict[str, np.ndarray]

    @property
    def phase(self) -> str:
        return self.header["phase"]

    @property
    def net_config(self) -> NetConfig:
        return NetConfig.from_dict(self.header["net_config"])

    @property
    def num_classes(self) -> int:
        return int(self.header["num_classes"])


def checkpoint_from_model(model: RegionNet, step: int, seed: int, train_config: dict[str, Any] | None = None) -> Checkpoint:
    train_config = train_config or {}
    header = {
        "schema_version": CHECKPOINT_SCHEMA,
        "phase": model.phase,
        "step": int(step),
        "seed": int(seed),
        "net_config": model.cfg.to_dict(),
        "num_classes": model.cfg.num_classes(model.phase),
        "config_hash": config_hash(train_config),
        "train_config": train_config,
    }
    state = {k: v.detach().cpu().clone().numpy() for k, v in model.state_dict().items()}
    return Checkpoint(header, state)


def model_from_checkpoint(ckpt: Checkpoint) -> RegionNet:
    model = RegionNet(ckpt.net_config, ckpt.phase, seed=int(ckpt.header.get("seed", 0)))
    dtype = next(iter(ckpt.state.values())).dtype if ckpt.state else np.float32
    if dtype == np.float64:
        model = model.double()
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in ckpt.state.items()})
    return model


def _blob_path(path: Path) -> Path:
    return path.with_suffix(".npz")


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    """Write ``<path>`` (JSON header, ``.json`` suffix enforced) and the sibling ``.npz`` blob."""
    path = Path(path).with_suffix(".json")
    buf = io.BytesIO()
    np.savez(buf, **ckpt.state)
    blob = buf.getvalue()
    atomic_write_bytes(_blob_path(path), blob)
    header = dict(ckpt.header, blob=_blob_path(path).name, blob_sha256=hashlib.sha256(blob).hexdigest())
    atomic_write_json(path, header)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path).with_suffix(".json")
    header = json.loads(path.read_text())
    if header.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValidationError(f"{path}: checkpoint schema {header.get('schema_version')!r} != {CHECKPOINT_SCHEMA}")
    blob = (path.parent / header["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise ValidationError(f"{path}: parameter blob checksum mismatch")
    with np.load(io.BytesIO(blob)) as data:
        state = {k: data[k] for k in data.files}
    header = {k: v for k, v in header.items() if k not in ("blob", "blob_sha256")}
    return Checkpoint(header, state)
