"""A small pre-LN transformer encoder-decoder.

The adapter is inserted between encoder and decoder: ``encode -> states ->
fuse(states, graph vector) -> decoder``. Token embeddings are shared by encoder and
decoder inputs and belong to the encoder parameter group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import MultiHeadAttention

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class BackboneError(ValueError):
    pass


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], extra: Iterable[str] = ()) -> "Vocab":
        vocab = cls(extra)
        for sent in sentences:
            for tok in sent:
                vocab.add(tok)
        return vocab

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str], add_eos: bool = True) -> list[int]:
        ids = [self.stoi.get(t, UNK) for t in tokens]
        return ids + [EOS] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out


def tokenize(text: str) -> list[str]:
    return text.split()


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return table


@dataclass
class BackboneConfig:
    vocab_size: int
    dim: int = 16
    heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ff_mult: int = 4
    dropout: float = 0.0
    max_positions: int = 256


class FeedForward(nn.Sequential):
    def __init__(self, dim, hidden, dropout):
        super().__init__(nn.Linear(dim, hidden), nn.ReLU(), nn.Dropout(dropout), nn.Linear(hidden, dim))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ff = FeedForward(cfg.dim, cfg.ff_mult * cfg.dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask):
        y = self.norm1(x)
        x = x + self.drop(self.attn(y, y, y, key_padding_mask=pad_mask)[0])
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.self_attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.cross_attn = MultiHeadAttention(cfg.dim, cfg.heads, cfg.dropout)
        self.norm3 = nn.LayerNorm(cfg.dim)
        self.ff = FeedForward(cfg.dim, cfg.ff_mult * cfg.dim, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, memory_pad_mask):
        y = self.norm1(x)
        x = x + self.drop(self.self_attn(y, y, y, causal=True)[0])
        y = self.norm2(x)
        x = x + self.drop(self.cross_attn(y, memory, memory, key_padding_mask=memory_pad_mask)[0])
        return x + self.drop(self.ff(self.norm3(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.norm = nn.LayerNorm(cfg.dim)


class Decoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.norm = nn.LayerNorm(cfg.dim)
        self.out = nn.Linear(cfg.dim, cfg.vocab_size)


class Seq2SeqBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.dim % cfg.heads:
            raise BackboneError("dim must be divisible by heads")
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.dim, padding_idx=PAD)
        nn.init.normal_(self.embed.weight, std=cfg.dim**-0.5)
        with torch.no_grad():
            self.embed.weight[PAD].zero_()
        self.register_buffer("positions", sinusoidal_positions(cfg.max_positions, cfg.dim).float(), persistent=False)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.drop = nn.Dropout(cfg.dropout)

    def _embed(self, tokens):
        if tokens.shape[1] > self.cfg.max_positions:
            raise BackboneError(f"sequence longer than {self.cfg.max_positions} positions")
        if int(tokens.max()) >= self.cfg.vocab_size or int(tokens.min()) < 0:
            raise BackboneError("token id out of range")
        x = self.embed(tokens) * math.sqrt(self.cfg.dim)
        return self.drop(x + self.positions[: tokens.shape[1]].to(x.dtype))

    def encode(self, tokens: torch.Tensor):
        """``tokens`` is ``[B, S]`` (or ``[S]``); returns ``(H [B, S, d], pad_mask [B, S])``."""
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if tokens.numel() == 0:
            raise BackboneError("empty input sequence")
        pad_mask = tokens == PAD
        if pad_mask.all(dim=1).any():
            raise BackboneError("input sequence consists only of padding")
        x = self._embed(tokens)
        for layer in self.encoder.layers:
            x = layer(x, pad_mask)
        return self.encoder.norm(x), pad_mask

    def decode_logits(self, memory: torch.Tensor, prefix: torch.Tensor, memory_pad_mask=None) -> torch.Tensor:
        """Teacher-forced logits ``[B, T, V]`` for a BOS-initial ``prefix``."""
        if prefix.dim() == 1:
            prefix = prefix.unsqueeze(0)
        if memory.dim() == 2:
            memory = memory.unsqueeze(0)
        if prefix.shape[1] == 0 or not bool((prefix[:, 0] == BOS).all()):
            raise BackboneError("decoder prefix must start with BOS")
        x = self._embed(prefix)
        for layer in self.decoder.layers:
            x = layer(x, memory, memory_pad_mask)
        return self.decoder.out(self.decoder.norm(x))


# ---------------------------------------------------------------------------
# search


class Hypothesis(NamedTuple):
    tokens: tuple[int, ...]
    score: float  # cumulative log-probability divided by len(tokens)


StepFn = Callable[[torch.Tensor], torch.Tensor]
"""Maps BOS-initial prefixes ``[K, t]`` to next-token log-probs ``[K, V]``."""

BANNED = (PAD, BOS, UNK)


def _mask_banned(logp: torch.Tensor) -> torch.Tensor:
    logp = logp.clone()
    logp[:, list(BANNED)] = -math.inf
    return logp


def greedy_search(step_fn: StepFn, max_len: int, batch_size: int = 1) -> list[Hypothesis]:
    """Batched arg-max decoding; ties go to the smaller token id."""
    if max_len < 1:
        raise BackboneError("max_len must be >= 1")
    prefix = torch.full((batch_size, 1), BOS, dtype=torch.long)
    done = torch.zeros(batch_size, dtype=torch.bool)
    totals = torch.zeros(batch_size, dtype=torch.float64)
    out: list[list[int]] = [[] for _ in range(batch_size)]
    for _ in range(max_len):
        logp = _mask_banned(step_fn(prefix).double())
        best = logp.argmax(dim=-1)  # first maximum -> smallest id
        for b in range(batch_size):
            if not done[b]:
                out[b].append(int(best[b]))
                totals[b] += logp[b, best[b]]
        done |= best == EOS
        prefix = torch.cat([prefix, best.unsqueeze(1)], dim=1)
        if bool(done.all()):
            break
    return [Hypothesis(tuple(seq), float(totals[b]) / len(seq)) for b, seq in enumerate(out)]


def beam_search(step_fn: StepFn, beam_size: int = 5, max_len: int = 50) -> Hypothesis:
    """Length-normalized beam search.

    A hypothesis finishes when it emits EOS or reaches ``max_len`` tokens.
    At each step all live beams are expanded and the ``beam_size`` best
    extensions (by cumulative log-probability) are kept; those that finished
    leave the beam. Ties are broken by the lexicographically smaller token
    sequence, so ``beam_size=1`` reproduces greedy decoding.
    """
    if beam_size < 1:
        raise BackboneError("beam_size must be >= 1")
    if max_len < 1:
        raise BackboneError("max_len must be >= 1")
    live: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    finished: list[Hypothesis] = []
    for t in range(1, max_len + 1):
        prefix = torch.tensor([(BOS,) + seq for _, seq in live], dtype=torch.long)
        logp = _mask_banned(step_fn(prefix).double()).tolist()
        candidates = []
        for (score, seq), row in zip(live, logp):
            for tok, lp in enumerate(row):
                if lp != -math.inf:
                    candidates.append((score + lp, seq + (tok,)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, seq in candidates[:beam_size]:
            if seq[-1] == EOS or t == max_len:
                finished.append(Hypothesis(seq, score / len(seq)))
            else:
                live.append((score, seq))
        if not live:
            break
    return min(finished, key=lambda h: (-h.score, h.tokens))
