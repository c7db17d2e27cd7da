import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def segment_softmax(logits: torch.Tensor, segment: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of ``logits`` (rows) within groups given by ``segment`` ids.

    ``logits`` is ``[M]`` or ``[M, H]``; normalization is per segment and per
    trailing column.
    """
    shape = (num_segments,) + tuple(logits.shape[1:])
    index = segment.view(-1, *([1] * (logits.dim() - 1))).expand_as(logits)
    seg_max = torch.full(shape, -math.inf, dtype=logits.dtype, device=logits.device)
    seg_max = seg_max.scatter_reduce(0, index, logits.detach(), reduce="amax", include_self=True)
    exp = torch.exp(logits - seg_max[segment])
    denom = torch.zeros(shape, dtype=logits.dtype, device=logits.device).index_add_(0, segment, exp)
    return exp / denom[segment]


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, key, value, key_padding_mask=None, causal=False):
        """Returns ``(output [B, Tq, d], weights [B, h, Tq, Tk])``.

        ``key_padding_mask`` is ``[B, Tk]`` and True at positions to ignore.
        """
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], -math.inf)
        if causal:
            tq, tk = scores.shape[-2:]
            future = torch.ones(tq, tk, dtype=torch.bool, device=scores.device).triu(1)
            scores = scores.masked_fill(future, -math.inf)
        weights = F.softmax(scores, dim=-1)
        out = self.dropout(weights) @ v
        b, _, tq, _ = out.shape
        out = out.transpose(1, 2).reshape(b, tq, self.dim)
        return self.out_proj(out), weights
