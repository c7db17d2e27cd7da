"""Backbone + graph adapter, parameter groups, and decoding helpers."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adapter import AdapterConfig, GraphAdapter, GraphBatch
from .backbone import BOS, EOS, PAD, BackboneConfig, Hypothesis, Seq2SeqBackbone, Vocab, beam_search, greedy_search
from .embeddings import EmbeddedGraph

GROUPS = ("encoder", "decoder", "adapter")


@dataclass
class ModelConfig:
    dim: int = 16
    layers: int = 2
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    gat_heads: int = 1
    sigma: str = "elu"
    dropout: float = 0.1
    backbone_dropout: float = 0.0
    no_gate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def param_group(name: str) -> str:
    """Map a parameter name to its freeze group."""
    if name.startswith("adapter."):
        return "adapter"
    if name.startswith(("backbone.embed.", "backbone.encoder.")):
        return "encoder"
    if name.startswith("backbone.decoder."):
        return "decoder"
    raise KeyError(f"parameter {name!r} belongs to no group")


def collate_tokens(seqs: Sequence[Sequence[int]], prefix_bos: bool = False) -> torch.Tensor:
    rows = [([BOS] if prefix_bos else []) + list(s) for s in seqs]
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


class GraphTranslator(nn.Module):
    def __init__(self, vocab: Vocab, config: ModelConfig):
        super().__init__()
        self.vocab = vocab
        self.config = config
        self.backbone = Seq2SeqBackbone(
            BackboneConfig(
                vocab_size=len(vocab),
                dim=config.dim,
                heads=config.heads,
                enc_layers=config.enc_layers,
                dec_layers=config.dec_layers,
                dropout=config.backbone_dropout,
            )
        )
        self.adapter = GraphAdapter(
            AdapterConfig(
                dim=config.dim,
                layers=config.layers,
                fusion_heads=config.heads,
                gat_heads=config.gat_heads,
                sigma=config.sigma,
                dropout=config.dropout,
                no_gate=config.no_gate,
            )
        )

    # -- parameter groups -------------------------------------------------

    def group_parameters(self, group: str) -> dict[str, nn.Parameter]:
        return {k: p for k, p in self.named_parameters() if param_group(k) == group}

    def set_frozen(self, groups: Sequence[str]) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(param_group(name) not in groups)

    def frozen_groups(self) -> list[str]:
        frozen = set()
        for name, p in self.named_parameters():
            if not p.requires_grad:
                frozen.add(param_group(name))
        return sorted(frozen)

    def group_checksum(self, group: str) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.group_parameters(group).items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    # -- forward ------------------------------------------------------------

    def memory(self, src: torch.Tensor, graphs: Sequence[EmbeddedGraph]):
        """Fused encoder states and the source padding mask."""
        h, pad_mask = self.backbone.encode(src)
        z_g = self.adapter.encode_graphs(GraphBatch(graphs))
        return self.adapter.fuse(h, z_g).output, pad_mask

    def forward(self, src: torch.Tensor, graphs: Sequence[EmbeddedGraph], prefix: torch.Tensor) -> torch.Tensor:
        memory, pad_mask = self.memory(src, graphs)
        return self.backbone.decode_logits(memory, prefix, pad_mask)

    def loss(self, src, graphs, tgt) -> torch.Tensor:
        """Token-level cross-entropy; ``tgt`` rows end with EOS and are PAD-filled."""
        prefix = torch.cat([torch.full((tgt.shape[0], 1), BOS, dtype=torch.long), tgt[:, :-1]], dim=1)
        logits = self(src, graphs, prefix)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=PAD)

    # -- decoding -------------------------------------------------------------

    @torch.no_grad()
    def greedy(self, sources: Sequence[Sequence[int]], graphs: Sequence[EmbeddedGraph], max_len: int) -> list[Hypothesis]:
        self.eval()
        src = collate_tokens(sources)
        memory, pad_mask = self.memory(src, graphs)

        def step(prefix):
            return F.log_softmax(self.backbone.decode_logits(memory, prefix, pad_mask)[:, -1], dim=-1)

        return greedy_search(step, max_len, batch_size=len(sources))

    @torch.no_grad()
    def beam(self, source: Sequence[int], graph: EmbeddedGraph, beam_size: int, max_len: int) -> Hypothesis:
        self.eval()
        memory, pad_mask = self.memory(collate_tokens([source]), [graph])

        def step(prefix):
            k = prefix.shape[0]
            mem = memory.expand(k, -1, -1)
            logits = self.backbone.decode_logits(mem, prefix, pad_mask.expand(k, -1))
            return F.log_softmax(logits[:, -1], dim=-1)

        return beam_search(step, beam_size, max_len)
