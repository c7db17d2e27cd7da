"""Central finite-difference check of the adapter gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .adapter import AdapterConfig, GraphAdapter, adapter_backward, adapter_forward, fuse
from .embeddings import StubProvider, embed_graph
from .scene_graph import Edge, Node, Origin, SceneGraph, build_msg

STEP = 1e-4
TOLERANCE = 1e-4


@dataclass
class GradcheckCase:
    adapter: GraphAdapter
    graph: object  # EmbeddedGraph
    h: torch.Tensor
    upstream: torch.Tensor


def five_node_msg(seed: int):
    """Three image nodes and two text nodes with a few seeded relations."""
    rng = np.random.default_rng(seed)
    isg = SceneGraph(
        tuple(Node(i, f"img-entity-{seed}-{i}", Origin.ISG) for i in range(3)),
        (Edge(0, 1, "holds"), Edge(1, 2, "is near"), Edge(int(rng.integers(3)), 2, "looks at")),
    )
    tsg = SceneGraph(
        (Node(0, f"txt-entity-{seed}-0", Origin.TSG), Node(1, f"txt-entity-{seed}-1", Origin.TSG)),
        (Edge(0, 1, "rides"),),
    )
    return build_msg(isg, tsg, f"image-{seed}")


def make_case(dim=4, layers=2, heads=2, seq_len=3, seed=7) -> GradcheckCase:
    gen = torch.Generator().manual_seed(seed)
    adapter = GraphAdapter(AdapterConfig(dim=dim, layers=layers, fusion_heads=heads)).double()
    with torch.no_grad():
        for name, p in adapter.named_parameters():
            if "norm" in name and name.endswith("weight"):
                p.copy_(0.5 + torch.rand(p.shape, generator=gen, dtype=torch.float64))
            else:
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1)
    graph = embed_graph(five_node_msg(seed), StubProvider(dim))
    h = torch.randn(seq_len, dim, generator=gen, dtype=torch.float64)
    upstream = torch.randn(seq_len, dim, generator=gen, dtype=torch.float64)
    return GradcheckCase(adapter, graph, h, upstream)


def _objective(case: GradcheckCase, h) -> float:
    with torch.no_grad():
        z_g = adapter_forward(case.graph, case.adapter, training=False)
        return float((fuse(h, z_g, case.adapter, training=False).output * case.upstream).sum())


def finite_difference(case: GradcheckCase, step: float = STEP) -> dict[str, torch.Tensor]:
    """Numerical gradient of ``sum(upstream * fused_output)`` for every parameter and the encoder states."""
    grads = {}
    h = case.h.clone()
    g = torch.zeros_like(h)
    for idx in np.ndindex(*h.shape):
        old = float(h[idx])
        h[idx] = old + step
        up = _objective(case, h)
        h[idx] = old - step
        down = _objective(case, h)
        h[idx] = old
        g[idx] = (up - down) / (2 * step)
    grads["encoder_states"] = g
    for name, p in case.adapter.named_parameters():
        g = torch.zeros_like(p)
        with torch.no_grad():
            for idx in np.ndindex(*p.shape):
                old = float(p[idx])
                p[idx] = old + step
                up = _objective(case, case.h)
                p[idx] = old - step
                down = _objective(case, case.h)
                p[idx] = old
                g[idx] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """``max|a - f| / max(max|a|, max|f|, floor)`` over one tensor."""
    diff = float((analytic - numeric).abs().max())
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), floor)
    return diff / scale


def run(dim=4, layers=2, heads=2, seq_len=3, seed=7) -> dict[str, float]:
    case = make_case(dim, layers, heads, seq_len, seed)
    analytic = adapter_backward(case.graph, case.h, case.adapter, case.upstream, training=False)
    numeric = finite_difference(case)
    return {name: relative_error(analytic[name], numeric[name]) for name in numeric}
