"""Feature providers for node labels, relation labels and whole-image/sentence keys."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

import numpy as np

from .io import atomic_write_text
from .scene_graph import SuperGraph

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


class EmbeddingError(ValueError):
    pass


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def splitmix64(state: int, count: int) -> list[int]:
    out = []
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


@lru_cache(maxsize=65536)
def _stub_embed_cached(label: str, dim: int) -> bytes:
    raw = splitmix64(fnv1a64(label.encode("utf-8")), dim)
    # ((v >> 11) * 2^-52) * 2 - 1, computed exactly in double precision
    values = [math.ldexp(v >> 11, -52) * 2.0 - 1.0 for v in raw]
    vec = np.array(values, dtype=np.float64)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise EmbeddingError(f"degenerate stub vector for {label!r}")
    return (vec / norm).astype(np.float32).tobytes()


def stub_embed(label: str, dim: int) -> np.ndarray:
    """Deterministic unit vector for ``label``; identical across processes and platforms."""
    if dim < 1:
        raise EmbeddingError("dim must be >= 1")
    return np.frombuffer(_stub_embed_cached(label, dim), dtype=np.float32).copy()


class EmbeddingProvider(Protocol):
    dim: int

    def __call__(self, label: str) -> np.ndarray: ...


class StubProvider:
    mode = "stub"

    def __init__(self, dim: int):
        if dim < 1:
            raise EmbeddingError("dim must be >= 1")
        self.dim = dim

    def __call__(self, label: str) -> np.ndarray:
        return stub_embed(label, self.dim)

    def __repr__(self):
        return f"StubProvider(dim={self.dim})"


@dataclass
class EmbeddingStore:
    dim: int
    records: dict[str, np.ndarray]

    def __post_init__(self):
        for label, vec in self.records.items():
            vec = np.asarray(vec, dtype=np.float32)
            if vec.shape != (self.dim,):
                raise EmbeddingError(f"vector for {label!r} has shape {vec.shape}, expected ({self.dim},)")
            self.records[label] = vec

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore) or self.dim != other.dim:
            return False
        if self.records.keys() != other.records.keys():
            return False
        return all(self.records[k].tobytes() == other.records[k].tobytes() for k in self.records)


class FileStoreProvider:
    mode = "file"

    def __init__(self, store: EmbeddingStore):
        self.store = store
        self.dim = store.dim

    def __call__(self, label: str) -> np.ndarray:
        try:
            return self.store.records[label].copy()
        except KeyError:
            raise EmbeddingError(f"label not in embedding store: {label!r}") from None


def save_store(store: EmbeddingStore, path: str | os.PathLike) -> None:
    lines = [json.dumps({"dim": store.dim})]
    for label, vec in store.records.items():
        # float32 -> python float is exact, and repr round-trips the double
        lines.append(json.dumps({"label": label, "vector": [float(x) for x in vec]}, ensure_ascii=False))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_store(path: str | os.PathLike) -> EmbeddingStore:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    try:
        header = json.loads(lines[0])
        dim = int(header["dim"])
    except (IndexError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise EmbeddingError(f"line 1: bad header: {exc}") from exc
    records = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            label, vector = rec["label"], rec["vector"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise EmbeddingError(f"line {lineno}: bad record: {exc}") from exc
        if len(vector) != dim:
            raise EmbeddingError(f"line {lineno}: vector length {len(vector)} does not match dim {dim}")
        if label in records:
            raise EmbeddingError(f"line {lineno}: duplicate label {label!r}")
        records[label] = np.array(vector, dtype=np.float32)
    return EmbeddingStore(dim, records)


def make_provider(name: str, dim: int | None = None) -> EmbeddingProvider:
    """Build a provider from a CLI-style name: ``stub`` or ``file:PATH``."""
    if name == "stub":
        if dim is None:
            raise EmbeddingError("stub provider needs a dim")
        return StubProvider(dim)
    if name.startswith("file:"):
        provider = FileStoreProvider(load_store(name[len("file:"):]))
        if dim is not None and provider.dim != dim:
            raise EmbeddingError(f"store dim {provider.dim} does not match model dim {dim}")
        return provider
    raise EmbeddingError(f"unknown provider {name!r}")


@dataclass
class EmbeddedGraph:
    """Feature matrices for one super-node graph.

    ``node_features`` has ``n + 1`` rows, the last one being the super node.
    ``edge_features`` has ``m + n`` rows: the ``m`` scene edges in order, then
    one super-link row per ordinary node. ``edge_index`` is ``(m, 2)`` holding
    scene edge endpoints (subject, object).
    """

    node_features: np.ndarray
    edge_features: np.ndarray
    edge_index: np.ndarray
    num_ordinary: int

    @property
    def num_scene_edges(self) -> int:
        return len(self.edge_index)

    @property
    def super_index(self) -> int:
        return self.num_ordinary

    @property
    def dim(self) -> int:
        return self.node_features.shape[1]


def embed_graph(graph: SuperGraph, provider: EmbeddingProvider) -> EmbeddedGraph:
    ordinary = graph.ordinary
    n, m, d = ordinary.num_nodes, ordinary.num_edges, provider.dim
    nodes = np.empty((n + 1, d), dtype=np.float32)
    for node in ordinary.nodes:
        nodes[node.id] = provider(node.label)
    nodes[n] = provider(graph.super_node.embedding_key)

    edges = np.empty((m + n, d), dtype=np.float32)
    for k, e in enumerate(ordinary.edges):
        edges[k] = provider(e.relation)
    for link in graph.super_links:
        edges[m + link.node] = provider(link.relation)

    if not (np.isfinite(nodes).all() and np.isfinite(edges).all()):
        raise EmbeddingError("provider returned non-finite features")
    index = np.array([[e.src, e.dst] for e in ordinary.edges], dtype=np.int64).reshape(m, 2)
    return EmbeddedGraph(nodes, edges, index, n)
