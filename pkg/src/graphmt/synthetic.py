"""Tiny synthetic bilingual corpora with matching scene graphs.

Sentences are ``attribute subject relation object``; the target language
reorders to ``subject attribute relation object`` and swaps every word for
its dictionary translation. The full lexicon plus reserved tokens is 40
types.
"""

from __future__ import annotations

import itertools

import numpy as np

from .backbone import Vocab
from .scene_graph import (
    ATTRIBUTE_RELATION,
    Edge,
    Node,
    Origin,
    SceneGraph,
    build_lsg,
    build_msg,
)
from .training import ParallelExample

ENTITIES = {
    "man": "homme", "woman": "femme", "dog": "chien", "horse": "cheval",
    "ball": "balle", "bike": "velo", "boy": "garcon", "girl": "fille",
}
RELATIONS = {"rides": "monte", "holds": "tient", "chases": "chasse", "watches": "regarde"}
ATTRIBUTES = {"red": "rouge", "black": "noir", "small": "petit", "young": "jeune", "old": "vieux", "white": "blanc"}
SCENES = ("street", "park", "beach")


def lexicon_vocab() -> Vocab:
    words = []
    for table in (ENTITIES, RELATIONS, ATTRIBUTES):
        words.extend(table)
        words.extend(table.values())
    return Vocab(words)


def _graph(triples, attrs, origin):
    ids: dict[str, int] = {}
    for s, _, o in triples:
        ids.setdefault(s, len(ids))
        ids.setdefault(o, len(ids))
    for ent, attr in attrs:
        ids.setdefault(ent, len(ids))
        ids.setdefault(attr, len(ids))
    nodes = tuple(Node(i, label, origin) for label, i in ids.items())
    edges = [Edge(ids[s], ids[o], r) for s, r, o in triples]
    edges += [Edge(ids[e], ids[a], ATTRIBUTE_RELATION) for e, a in attrs]
    return SceneGraph(nodes, tuple(edges))


def tsg_for(attr, subj, rel, obj) -> SceneGraph:
    return _graph([(subj, rel, obj)], [(subj, attr)], Origin.TSG)


def isg_for(attr, subj, rel, obj, scene) -> SceneGraph:
    # image parsers describe the same scene with their own wording plus background context
    subj_v, obj_v = f"one {attr} {subj}", f"a {obj}"
    return _graph([(subj_v, rel, obj_v), (subj_v, "is in", scene), (obj_v, "is in", scene)], [], Origin.ISG)


def translate(attr, subj, rel, obj) -> list[str]:
    return [ENTITIES[subj], ATTRIBUTES[attr], RELATIONS[rel], ENTITIES[obj]]


def all_combinations() -> list[tuple[str, str, str, str]]:
    return [
        (a, s, r, o)
        for a, s, r, o in itertools.product(ATTRIBUTES, ENTITIES, RELATIONS, ENTITIES)
        if s != o
    ]


def make_corpus(n: int, seed: int = 0, kind: str = "msg", exclude=()) -> list[ParallelExample]:
    """``n`` distinct examples; ``kind`` is ``"msg"`` or ``"lsg"``."""
    rng = np.random.default_rng(seed)
    pool = [c for c in all_combinations() if c not in set(exclude)]
    picks = rng.choice(len(pool), size=n, replace=False)
    out = []
    for k, idx in enumerate(picks):
        attr, subj, rel, obj = pool[idx]
        source = [attr, subj, rel, obj]
        tsg = tsg_for(attr, subj, rel, obj)
        if kind == "msg":
            scene = SCENES[int(rng.integers(len(SCENES)))]
            graph = build_msg(isg_for(attr, subj, rel, obj, scene), tsg, f"image-{seed}-{k}")
        elif kind == "lsg":
            graph = build_lsg(tsg, " ".join(source))
        else:
            raise ValueError(f"unknown corpus kind {kind!r}")
        out.append(ParallelExample(graph, source, translate(attr, subj, rel, obj)))
    return out


def combos_of(examples) -> list[tuple[str, str, str, str]]:
    return [tuple(ex.source) for ex in examples]
