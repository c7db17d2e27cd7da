"""Corpus-level BLEU-4 over whitespace tokens."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

MAX_ORDER = 4


class BleuError(ValueError):
    pass


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    smoothing: str = "none",
) -> BleuReport:
    """Clipped n-gram counts pooled over the corpus, one reference per hypothesis.

    ``smoothing="add_one"`` adds 1 to numerator and denominator of every
    n-gram precision.
    """
    if len(hypotheses) != len(references):
        raise BleuError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise BleuError("empty corpus")
    if smoothing not in ("none", "add_one"):
        raise BleuError(f"unknown smoothing {smoothing!r}")

    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += sum(h.values())

    add = 1 if smoothing == "add_one" else 0
    precisions = [
        (m + add) / (t + add) if t + add > 0 else 0.0 for m, t in zip(matches, totals)
    ]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if min(precisions) <= 0.0 or bp == 0.0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(min(bleu, 100.0), precisions, bp, hyp_len, ref_len)
