"""Training checkpoints: model state + metadata with an integrity hash.

Layout: ``b"STTNCKPT"`` | u32 LE version | 32-byte SHA-256 of the payload |
payload, where the payload is an ``.npz`` archive holding every parameter
and buffer by dotted name plus ``__meta__`` (UTF-8 JSON as uint8).
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..models import ModelConfig, Network, build_model

MAGIC = b"STTNCKPT"
VERSION = 1
_HEADER = len(MAGIC) + 4 + 32


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: Network, meta: dict | None = None) -> Path:
    path = Path(path)
    meta = dict(meta or {})
    meta["model"] = model.config.to_dict()
    arrays = model.state_dict()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    blob = MAGIC + struct.pack("<I", VERSION) + hashlib.sha256(payload).digest() + payload
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER or blob[:len(MAGIC)] != MAGIC:
        found = blob[:len(MAGIC)]
        raise CheckpointError(f"{path}: not a training checkpoint (expected magic {MAGIC!r}, found {found!r})")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[len(MAGIC) + 4:_HEADER]
    payload = blob[_HEADER:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch; file is corrupted or was modified")
    with np.load(io.BytesIO(payload), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return arrays, meta


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    arrays, meta = read_checkpoint(path)
    try:
        model = build_model(ModelConfig(**meta["model"]))
        model.load_state_dict(arrays)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not match its model description: {exc}") from exc
    model.eval()
    return model, meta


def is_training_checkpoint(path: str | Path) -> bool:
    with open(path, "rb") as f:
        return f.read(len(MAGIC)) == MAGIC
