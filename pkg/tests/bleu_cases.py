"""Hand-counted corpus BLEU cases: (hyps, refs, smoothing, expected)."""

import math

CASES = {
    "perfect match": (["the cat sat on the mat"], ["the cat sat on the mat"], "none", 100.0),
    # clipped p1 = 1/4, no higher-order matches
    "repeated unigram": (["the the the the"], ["the cat sat down"], "none", 0.0),
    # p1..p4 = 2/5, 1/4, 1/3, 1/2; equal lengths so BP = 1
    "repeated unigram add-one": (
        ["the the the the"], ["the cat sat down"], "add_one", 100 * (2 / 5 * 1 / 4 * 1 / 3 * 1 / 2) ** 0.25,
    ),
    # all precisions 1 after add-one (p4 = 1/1); BP = exp(1 - 4/3)
    "short hypothesis add-one": (["the cat sat"], ["the cat sat down"], "add_one", 100 * math.exp(-1 / 3)),
    # pooled counts: 8/9, 5/7, 3/5, 2/3 with 9 tokens each side
    "two-sentence pooling": (
        ["a b c d e", "a b c d"], ["a b c d e", "a b x d"], "none", 100 * (8 / 9 * 5 / 7 * 3 / 5 * 2 / 3) ** 0.25,
    ),
}
