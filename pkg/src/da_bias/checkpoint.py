"""Binary checkpoint container.

Layout::

    b"DABCKPT\\0"                      8-byte magic
    uint64 LE                          header length in bytes
    JSON header (utf-8)                format_version, model_config, da_vocab,
                                       fusion_mode, step, seed, has_adapter,
                                       parameters [{name, shape, trainable}],
                                       freeze_mask, meta
    per parameter, in header order:
        uint64 LE                      number of values
        float64 LE * n                 row-major values
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .dialog_act import DaVocabulary
from .model import ContextualTransducer, ModelConfig

MAGIC = b"DABCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: ContextualTransducer
    step: int = 0
    seed: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def freeze_mask(self) -> list[str]:
        return sorted(p.name for p in self.model.parameters() if not p.trainable)

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.model.parameters()}


def _header(ckpt: Checkpoint) -> dict:
    m = ckpt.model
    return {
        "format_version": FORMAT_VERSION,
        "model_config": m.config.to_json(),
        "da_vocab": m.da_vocab.to_json(),
        "fusion_mode": m.config.fusion_mode,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "has_adapter": m.has_adapter,
        "parameters": [{"name": p.name, "shape": list(p.shape), "trainable": p.trainable} for p in m.parameters()],
        "freeze_mask": ckpt.freeze_mask,
        "meta": ckpt.meta,
    }


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(_header(ckpt), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(header)), header]
    for p in ckpt.model.parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        chunks.append(struct.pack("<Q", arr.size))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(ckpt: Checkpoint, path: os.PathLike) -> None:
    data = to_bytes(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def from_bytes(data: bytes, expect: Optional[ModelConfig] = None) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ModelConfig.from_json(header["model_config"])
    if expect is not None:
        mismatched = {k: (v, getattr(config, k)) for k, v in expect.to_json().items() if getattr(config, k) != v}
        if mismatched:
            raise CheckpointError(f"checkpoint dimensions differ from the expected config: {mismatched}")
    model = ContextualTransducer(config, DaVocabulary.from_json(header["da_vocab"]), seed=0,
                                 with_adapter=header["has_adapter"])
    params = model.named_parameters()
    listed = [e["name"] for e in header["parameters"]]
    if set(listed) != set(params):
        missing = sorted(set(params) - set(listed))
        extra = sorted(set(listed) - set(params))
        raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    off = 16 + hlen
    for entry in header["parameters"]:
        p = params[entry["name"]]
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointError(f"{p.name}: stored shape {entry['shape']} != model shape {list(p.shape)}")
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        if n != p.data.size:
            raise CheckpointError(f"{p.name}: stored {n} values, expected {p.data.size}")
        p.tensor.data = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(p.shape)
        off += 8 * n
        p.trainable = bool(entry["trainable"])
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after the last parameter")
    return Checkpoint(model, step=int(header["step"]), seed=int(header["seed"]), meta=header.get("meta", {}))


def load_checkpoint(path: os.PathLike, expect: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(data, expect)
