"""Versioned binary model container.

Layout: 8-byte magic, little-endian u32 version, u64 header length, UTF-8
JSON header, then every tensor as little-endian float64 in the order listed
by ``header["tensors"]``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import LoraAdapter, ModelConfig, ToyTransformer, adapter_keys, base_param_names

MAGIC = b"FPCKPT\x00\x01"
VERSION = 1


def _tensors(model: ToyTransformer):
    for name in base_param_names(model.cfg):
        yield f"base/{name}", model.base[name]
    for key in adapter_keys(model.cfg):
        yield f"delta/{key}", model.delta[key]
    for key in adapter_keys(model.cfg):
        yield f"lora/{key}/a", model.adapters[key].a
        yield f"lora/{key}/b", model.adapters[key].b


def to_bytes(model: ToyTransformer, meta: dict | None = None) -> bytes:
    tensors = list(_tensors(model))
    header = {
        "format": "fedpruner-checkpoint",
        "version": VERSION,
        "config": model.cfg.to_json(),
        "lora_scaling": {k: model.adapters[k].scaling for k in adapter_keys(model.cfg)},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(raw)), raw]
    parts += [np.ascontiguousarray(t, dtype="<f8").tobytes() for _, t in tensors]
    return b"".join(parts)


def from_bytes(blob: bytes) -> tuple[ToyTransformer, dict]:
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a fedpruner checkpoint")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", blob, off)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(blob):
            raise CheckpointError("truncated checkpoint")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off = end
    if off != len(blob):
        raise CheckpointError("trailing bytes after tensor data")
    cfg = ModelConfig(**header["config"])
    base = {n: arrays[f"base/{n}"] for n in base_param_names(cfg)}
    for arr in base.values():
        arr.setflags(write=False)
    keys = adapter_keys(cfg)
    delta = {k: arrays[f"delta/{k}"] for k in keys}
    adapters = {
        k: LoraAdapter(arrays[f"lora/{k}/a"], arrays[f"lora/{k}/b"], float(header["lora_scaling"][k]))
        for k in keys
    }
    return ToyTransformer(cfg, base, delta, adapters), header["meta"]


def save(path, model: ToyTransformer, meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, meta))


def load(path) -> tuple[ToyTransformer, dict]:
    return from_bytes(Path(path).read_bytes())
