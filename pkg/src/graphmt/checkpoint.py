"""Checkpoint container.

Layout::

    b"GMTCKPT1"                 8-byte magic
    <uint64 little-endian>      manifest length in bytes
    <manifest>                  UTF-8 JSON, keys sorted
    <blobs>                     raw little-endian float32 tensors

The manifest maps every tensor name to ``{"shape", "dtype", "offset",
"group"}`` (offset relative to the start of the blob section) and carries a
free-form ``meta`` object (model config, vocabulary, stage).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .io import atomic_write_bytes
from .model import GraphTranslator, ModelConfig, param_group
from .backbone import Vocab

MAGIC = b"GMTCKPT1"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def group(self, group: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if param_group(k) == group}

    def to_bytes(self) -> bytes:
        entries = {}
        blobs = []
        offset = 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype=_DTYPE)
            entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset, "group": param_group(name)}
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        manifest = json.dumps({"tensors": entries, "meta": self.meta}, sort_keys=True).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 16 or data[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (length,) = struct.unpack("<Q", data[8:16])
        try:
            manifest = json.loads(data[16 : 16 + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt manifest: {exc}") from exc
        if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), dict):
            raise CheckpointError("corrupt manifest: no tensor table")
        blob = data[16 + length :]
        tensors = {}
        for name, entry in manifest["tensors"].items():
            if entry["dtype"] != "float32":
                raise CheckpointError(f"{name}: unsupported dtype {entry['dtype']}")
            shape = tuple(entry["shape"])
            start = entry["offset"]
            stop = start + int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
            if stop > len(blob):
                raise CheckpointError(f"{name}: truncated tensor data")
            tensors[name] = np.frombuffer(blob[start:stop], dtype=_DTYPE).reshape(shape).copy()
        return cls(tensors, manifest.get("meta", {}))

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)


def from_model(model: GraphTranslator, **meta) -> Checkpoint:
    tensors = {
        name: p.detach().cpu().to(torch.float32).numpy().copy() for name, p in model.named_parameters()
    }
    meta = {"config": model.config.to_dict(), "vocab": model.vocab.itos, **meta}
    return Checkpoint(tensors, meta)


def load_into(model: GraphTranslator, ckpt: Checkpoint) -> None:
    params = dict(model.named_parameters())
    missing = params.keys() - ckpt.tensors.keys()
    unexpected = ckpt.tensors.keys() - params.keys()
    if missing or unexpected:
        raise CheckpointError(f"tensor mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    with torch.no_grad():
        for name, p in params.items():
            arr = ckpt.tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"{name}: shape {arr.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))


def build_model(ckpt: Checkpoint) -> GraphTranslator:
    try:
        config = ModelConfig(**ckpt.meta["config"])
        vocab = Vocab(ckpt.meta["vocab"][4:])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint lacks model metadata: {exc}") from exc
    model = GraphTranslator(vocab, config)
    load_into(model, ckpt)
    return model


def tensors_identical(model: GraphTranslator, ckpt: Checkpoint, group: str) -> list[str]:
    """Names of ``group`` tensors whose bytes differ from the checkpoint."""
    differ = []
    for name, p in model.group_parameters(group).items():
        ours = p.detach().cpu().to(torch.float32).numpy()
        if name not in ckpt.tensors or ours.tobytes() != ckpt.tensors[name].astype(_DTYPE).tobytes():
            differ.append(name)
    return differ
