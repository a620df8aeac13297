"""Binary checkpoint format.

Layout, all integers little-endian:

    magic "TRKA" | version u32 | tensor count u64
    per tensor:  name length u32 | UTF-8 name | rank u32 | dims u64 each
                 | float64 values, C order
    trailer:     blob length u64 | UTF-8 JSON {"run": config, "dataset": info}

Tensors are written in parameter-store order, the JSON trailer with sorted
keys, so saving a freshly restored model reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .model import DatasetInfo, Model

MAGIC = b"TRKA"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]  # insertion-ordered


def save_checkpoint(path: str, model: Model):
    items = list(model.store.items())
    doc = {"run": model.cfg.to_dict(), "dataset": model.info.to_dict()}
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(items)))
        for name, param in items:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            data = np.ascontiguousarray(param.data, dtype=np.float64)
            f.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                f.write(struct.pack("<Q", dim))
            f.write(data.astype("<f8", copy=False).tobytes())
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)


class _Reader:
    """Tracks the byte offset so format errors can name where parsing died."""

    def __init__(self, f):
        self.f = f
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        chunk = self.f.read(n)
        if len(chunk) != n:
            raise CheckpointFormatError(
                f"truncated at byte {self.offset + len(chunk)}: "
                f"needed {n} bytes for {what}")
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        r = _Reader(f)
        magic = r.take(4, "magic")
        if magic != MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r} at byte 0")
        version = r.u32("version")
        if version != VERSION:
            raise CheckpointFormatError(
                f"unsupported format version {version} at byte 4")
        count = r.u64("tensor count")
        tensors: dict[str, np.ndarray] = {}
        for k in range(count):
            name_len = r.u32(f"tensor {k} name length")
            name = r.take(name_len, f"tensor {k} name").decode("utf-8")
            rank = r.u32(f"{name} rank")
            shape = tuple(r.u64(f"{name} dim {a}") for a in range(rank))
            n_vals = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = r.take(8 * n_vals, f"{name} values")
            if name in tensors:
                raise CheckpointFormatError(
                    f"duplicate tensor name {name!r} at byte {r.offset}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").astype(
                np.float64).reshape(shape)
        blob_len = r.u64("config length")
        blob = r.take(blob_len, "config blob")
        trailing = f.read(1)
        if trailing:
            raise CheckpointFormatError(
                f"unexpected trailing bytes at byte {r.offset}")
    try:
        doc = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointFormatError(f"config blob is not valid JSON: {err}")
    return Checkpoint(config=doc, tensors=tensors)


def restore_model(path: str) -> Model:
    """Rebuild the model a checkpoint was saved from, weights included."""
    ckpt = load_checkpoint(path)
    if "run" not in ckpt.config or "dataset" not in ckpt.config:
        raise CheckpointFormatError("config blob lacks 'run'/'dataset' sections")
    cfg = RunConfig.from_dict(ckpt.config["run"])
    info = DatasetInfo.from_dict(ckpt.config["dataset"])
    model = Model(cfg, info)
    model.load_state(ckpt.tensors)
    # checkpoints come from trained models; keep structure edits locked out
    model.mark_training_started()
    return model
