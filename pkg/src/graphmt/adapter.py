"""Cross-modal graph attention adapter.

Message passing over a super-node graph, global attention pooling into one
graph vector, and gated cross-attention fusion of that vector into the
encoder states. The same parameters serve multimodal and linguistic
graphs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import MultiHeadAttention, segment_softmax
from .embeddings import EmbeddedGraph

NEGATIVE_SLOPE = 0.2

_ACTIVATIONS = {
    "elu": F.elu,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


class AdapterError(ValueError):
    pass


@dataclass
class AdapterConfig:
    dim: int = 16
    layers: int = 2
    fusion_heads: int = 2
    gat_heads: int = 1
    sigma: str = "elu"
    dropout: float = 0.1
    no_gate: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise AdapterError("need at least one GAT layer")
        if self.dim % self.fusion_heads or self.dim % self.gat_heads:
            raise AdapterError("dim must be divisible by the number of heads")
        if not 0.0 <= self.dropout < 1.0:
            raise AdapterError("dropout must lie in [0, 1)")
        if self.sigma not in _ACTIVATIONS:
            raise AdapterError(f"unknown activation {self.sigma!r}")


class GraphBatch:
    """Disjoint union of embedded graphs with the directed message list.

    Each scene edge yields two messages (both directions, same edge row);
    each super link yields ordinary->super and super->ordinary messages.
    ``node_graph`` assigns every node row to its graph for pooling.
    """

    def __init__(self, graphs: Sequence[EmbeddedGraph], dtype=torch.float32):
        if not graphs:
            raise AdapterError("empty graph batch")
        dims = {g.dim for g in graphs}
        if len(dims) != 1:
            raise AdapterError(f"graphs disagree on feature dim: {sorted(dims)}")
        dst, src, eid, seg, starts = [], [], [], [], []
        node_off = edge_off = 0
        for gi, g in enumerate(graphs):
            n, m = g.num_ordinary, g.num_scene_edges
            if n == 0:
                raise AdapterError("super node has no ordinary neighbours")
            sn = n
            s, o = g.edge_index[:, 0], g.edge_index[:, 1]
            ks = np.arange(m)
            ords = np.arange(n)
            links = m + ords
            dst.append(np.concatenate([s, o, ords, np.full(n, sn)]) + node_off)
            src.append(np.concatenate([o, s, np.full(n, sn), ords]) + node_off)
            eid.append(np.concatenate([ks, ks, links, links]) + edge_off)
            seg.append(np.full(n + 1, gi))
            starts.append(node_off)
            node_off += n + 1
            edge_off += m + n

        self.num_graphs = len(graphs)
        self.num_nodes = node_off
        self.node_features = torch.from_numpy(np.concatenate([g.node_features for g in graphs])).to(dtype)
        self.edge_features = torch.from_numpy(np.concatenate([g.edge_features for g in graphs])).to(dtype)
        self.msg_dst = torch.from_numpy(np.concatenate(dst).astype(np.int64))
        self.msg_src = torch.from_numpy(np.concatenate(src).astype(np.int64))
        self.msg_edge = torch.from_numpy(np.concatenate(eid).astype(np.int64))
        self.node_graph = torch.from_numpy(np.concatenate(seg).astype(np.int64))
        self.node_start = starts
        self.super_rows = [start + g.num_ordinary for start, g in zip(starts, graphs)]

    def to(self, dtype):
        self.node_features = self.node_features.to(dtype)
        self.edge_features = self.edge_features.to(dtype)
        return self


class GATLayer(nn.Module):
    """One edge-featured attention layer with an identity skip.

    Each message concatenates target state, source state and edge feature.
    Attention logits ``LeakyReLU(att . cat)`` are normalized over the messages
    arriving at a node; message values are ``LeakyReLU(weight @ cat)``.
    """

    def __init__(self, dim: int, heads: int = 1, sigma: str = "elu"):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.weight = nn.Parameter(torch.empty(dim, 3 * dim))
        self.att = nn.Parameter(torch.empty(heads, 3 * dim))
        self.sigma = _ACTIVATIONS[sigma]
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.xavier_uniform_(self.weight)
        nn.init.xavier_uniform_(self.att)

    def attention(self, z: torch.Tensor, batch: GraphBatch):
        cat = torch.cat([z[batch.msg_dst], z[batch.msg_src], batch.edge_features[batch.msg_edge]], dim=-1)
        logits = F.leaky_relu(cat @ self.att.t(), NEGATIVE_SLOPE)
        return cat, segment_softmax(logits, batch.msg_dst, batch.num_nodes)

    def forward(self, z: torch.Tensor, batch: GraphBatch) -> torch.Tensor:
        if z.shape != (batch.num_nodes, self.dim):
            raise AdapterError(f"expected node states of shape {(batch.num_nodes, self.dim)}, got {tuple(z.shape)}")
        cat, alpha = self.attention(z, batch)
        msg = F.leaky_relu(cat @ self.weight.t(), NEGATIVE_SLOPE)
        msg = msg.view(-1, self.heads, self.dim // self.heads) * alpha.unsqueeze(-1)
        agg = torch.zeros(batch.num_nodes, self.heads, self.dim // self.heads, dtype=z.dtype)
        agg = agg.index_add_(0, batch.msg_dst, msg).view(batch.num_nodes, self.dim)
        return self.sigma(agg) + z


class GlobalAttentionPool(nn.Module):
    """Per graph: ``sum over nodes of softmax(gate(z)) * feat(z)``."""

    def __init__(self, dim: int):
        super().__init__()
        self.gate = nn.Linear(dim, 1)
        self.feat = nn.Linear(dim, dim)

    def weights(self, z, node_graph, num_graphs):
        return segment_softmax(self.gate(z).squeeze(-1), node_graph, num_graphs)

    def forward(self, z: torch.Tensor, node_graph: torch.Tensor, num_graphs: int) -> torch.Tensor:
        w = self.weights(z, node_graph, num_graphs)
        out = torch.zeros(num_graphs, z.shape[-1], dtype=z.dtype)
        return out.index_add_(0, node_graph, w.unsqueeze(-1) * self.feat(z))


@dataclass
class FusionState:
    attended: torch.Tensor  # attention output plus residual
    fused: torch.Tensor  # layer-normed attended stream
    gate: torch.Tensor | None
    output: torch.Tensor
    attn_weights: torch.Tensor


class GatedFusion(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.1, no_gate: bool = False):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.dropout = nn.Dropout(dropout)
        self.norm_fuse = nn.LayerNorm(dim)
        self.gate_in = nn.Linear(2 * dim, dim)
        self.gate_out = nn.Linear(dim, dim)
        self.norm_gate = nn.LayerNorm(dim)
        self.no_gate = no_gate

    def forward(self, h: torch.Tensor, z_g: torch.Tensor) -> FusionState:
        """``h`` is ``[B, T, d]``, ``z_g`` is ``[B, d]`` (a length-1 key/value sequence)."""
        if h.shape[-1] != z_g.shape[-1]:
            raise AdapterError(f"width mismatch: encoder states have {h.shape[-1]}, graph vector has {z_g.shape[-1]}")
        kv = z_g.unsqueeze(1)
        attended, weights = self.attn(h, kv, kv)
        a = attended + h
        o = self.norm_fuse(self.dropout(a))
        if self.no_gate:
            return FusionState(a, o, None, self.norm_gate(o), weights)
        g = torch.sigmoid(self.gate_out(F.relu(self.gate_in(torch.cat([o, h], dim=-1)))))
        h_prime = self.norm_gate(g * o + (1 - g) * h)
        return FusionState(a, o, g, h_prime, weights)


class GraphAdapter(nn.Module):
    def __init__(self, config: AdapterConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            GATLayer(config.dim, config.gat_heads, config.sigma) for _ in range(config.layers)
        )
        self.pool = GlobalAttentionPool(config.dim)
        self.fusion = GatedFusion(config.dim, config.fusion_heads, config.dropout, config.no_gate)

    def node_states(self, batch: GraphBatch) -> list[torch.Tensor]:
        """Node states after each layer, starting with the input features."""
        dtype = next(self.parameters()).dtype
        batch.to(dtype)
        z = batch.node_features
        if z.shape[-1] != self.config.dim:
            raise AdapterError(f"graph features have width {z.shape[-1]}, adapter expects {self.config.dim}")
        states = [z]
        for layer in self.layers:
            states.append(layer(states[-1], batch))
        return states

    def encode_graphs(self, batch: GraphBatch) -> torch.Tensor:
        z = self.node_states(batch)[-1]
        return self.pool(z, batch.node_graph, batch.num_graphs)

    def fuse(self, h: torch.Tensor, z_g: torch.Tensor) -> FusionState:
        return self.fusion(h, z_g)


# ---------------------------------------------------------------------------
# per-graph functional surface


def _single(graph: EmbeddedGraph, adapter: GraphAdapter) -> GraphBatch:
    return GraphBatch([graph], dtype=next(adapter.parameters()).dtype)


def attention_coefficients(graph: EmbeddedGraph, adapter: GraphAdapter, layer: int, node: int):
    """Attention weights of the messages arriving at ``node`` in ``layer`` (0-based).

    Returns ``(sources, edge_rows, alpha)``; ``node == graph.num_ordinary`` is
    the super node.
    """
    if not 0 <= node <= graph.num_ordinary:
        raise AdapterError(f"node {node} out of range")
    batch = _single(graph, adapter)
    with torch.no_grad():
        z = adapter.node_states(batch)[layer]
        _, alpha = adapter.layers[layer].attention(z, batch)
    mask = batch.msg_dst == node
    if not mask.any():
        raise AdapterError(f"node {node} has no incident messages")
    return batch.msg_src[mask].numpy(), batch.msg_edge[mask].numpy(), alpha[mask].numpy()


def gat_layer_forward(graph: EmbeddedGraph, z_prev, adapter: GraphAdapter, layer: int) -> torch.Tensor:
    batch = _single(graph, adapter)
    z_prev = torch.as_tensor(z_prev, dtype=batch.node_features.dtype)
    return adapter.layers[layer](z_prev, batch)


def adapter_forward(graph: EmbeddedGraph, adapter: GraphAdapter, training: bool = False) -> torch.Tensor:
    adapter.train(training)
    return adapter.encode_graphs(_single(graph, adapter))[0]


def fuse(h, z_g, adapter: GraphAdapter, training: bool = False) -> FusionState:
    """Unbatched fusion: ``h`` is ``[T, d]``, ``z_g`` is ``[d]``."""
    adapter.train(training)
    if h.shape[0] < 1:
        raise AdapterError("need at least one encoder position")
    state = adapter.fuse(h.unsqueeze(0), z_g.unsqueeze(0))
    return FusionState(
        state.attended[0], state.fused[0], None if state.gate is None else state.gate[0], state.output[0], state.attn_weights[0]
    )


def adapter_backward(graph: EmbeddedGraph, h, adapter: GraphAdapter, upstream, training: bool = False):
    """Gradients of ``sum(upstream * fused_output)`` for every adapter tensor and for ``h``.

    Runs forward and reverse mode in one call so no stale cache can be used.
    Parameters with ``requires_grad=False`` report an all-zero gradient.
    """
    h = torch.as_tensor(h).detach().clone().requires_grad_(True)
    upstream = torch.as_tensor(upstream, dtype=h.dtype)
    params = dict(adapter.named_parameters())
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    z_g = adapter_forward(graph, adapter, training)
    state = fuse(h, z_g, adapter, training)
    if upstream.shape != state.output.shape:
        raise AdapterError(f"upstream gradient has shape {tuple(upstream.shape)}, expected {tuple(state.output.shape)}")
    inputs = [h] + list(trainable.values())
    grads = torch.autograd.grad(state.output, inputs, grad_outputs=upstream, allow_unused=True)
    out = {"encoder_states": grads[0]}
    grad_of = dict(zip(trainable, grads[1:]))
    for name, p in params.items():
        g = grad_of.get(name)
        out[name] = torch.zeros_like(p) if g is None else g
    return out
