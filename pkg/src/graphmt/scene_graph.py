"""Scene graphs: parsing, validation, and super-node graph assembly.

Image and textual scene graphs share one JSONL wire format, one record per
line::

    {"entities": ["man", "telescope"], "relations": [["man", "looks through", "telescope"]]}

A multimodal scene graph (MSG) is the disjoint union of an image graph and a
textual graph plus one global super node linked to every ordinary node. The
linguistic variant (LSG) keeps only the textual graph.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

GLOBAL_RELATION = "global"
ATTRIBUTE_RELATION = "has_attribute"


class SceneGraphError(ValueError):
    pass


class Origin(str, Enum):
    ISG = "ISG"
    TSG = "TSG"


class SuperKind(str, Enum):
    IMAGE = "Image"
    TEXT = "Text"


@dataclass(frozen=True)
class Node:
    id: int
    label: str
    origin: Origin


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    relation: str


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[Node, ...] = ()
    edges: tuple[Edge, ...] = ()

    def __post_init__(self):
        for expected, node in enumerate(self.nodes):
            if node.id != expected:
                raise SceneGraphError(f"node ids must be dense 0..n-1, got {node.id} at position {expected}")
            if not isinstance(node.label, str) or not node.label:
                raise SceneGraphError(f"node {node.id} has an empty label")
        n = len(self.nodes)
        for edge in self.edges:
            if not (0 <= edge.src < n and 0 <= edge.dst < n):
                raise SceneGraphError(f"edge {edge} references a missing node")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def labels(self) -> list[str]:
        return [node.label for node in self.nodes]

    def permute(self, order: Sequence[int]) -> "SceneGraph":
        """Relabel nodes so that old node ``order[k]`` becomes node ``k``."""
        if sorted(order) != list(range(self.num_nodes)):
            raise SceneGraphError("order must be a permutation of the node ids")
        new_id = {old: new for new, old in enumerate(order)}
        nodes = tuple(
            Node(k, self.nodes[old].label, self.nodes[old].origin) for k, old in enumerate(order)
        )
        edges = tuple(Edge(new_id[e.src], new_id[e.dst], e.relation) for e in self.edges)
        return SceneGraph(nodes, edges)


@dataclass(frozen=True)
class SuperNode:
    kind: SuperKind
    embedding_key: str


@dataclass(frozen=True)
class SuperLink:
    node: int
    relation: str = GLOBAL_RELATION


@dataclass(frozen=True)
class SuperGraph:
    """Ordinary scene graph plus one global node linked to every ordinary node."""

    ordinary: SceneGraph
    super_node: SuperNode
    super_links: tuple[SuperLink, ...]

    def __post_init__(self):
        linked = sorted(link.node for link in self.super_links)
        if linked != list(range(self.ordinary.num_nodes)):
            raise SceneGraphError("super node must link to every ordinary node exactly once")

    @property
    def kind(self) -> SuperKind:
        return self.super_node.kind

    @property
    def num_nodes(self) -> int:
        return self.ordinary.num_nodes

    def permute(self, order: Sequence[int]) -> "SuperGraph":
        return _wire(type(self), self.ordinary.permute(order), self.super_node, self.super_links[0].relation)


class MultimodalSceneGraph(SuperGraph):
    pass


class LinguisticSceneGraph(SuperGraph):
    pass


@dataclass(frozen=True)
class MalformedRecord:
    line: int
    reason: str


@dataclass
class ValidationReport:
    connected: bool
    isolated_node_ids: list[int] = field(default_factory=list)
    malformed_records: list[MalformedRecord] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.malformed_records


# ---------------------------------------------------------------------------
# parsing


def _parse_record(obj, origin: Origin) -> SceneGraph:
    if not isinstance(obj, dict):
        raise SceneGraphError("record is not a JSON object")
    entities = obj.get("entities")
    relations = obj.get("relations")
    if not isinstance(entities, list) or not isinstance(relations, list):
        raise SceneGraphError("missing 'entities' or 'relations' array")

    ids: dict[str, int] = {}
    for entity in entities:
        if not isinstance(entity, str) or not entity:
            raise SceneGraphError("entity must be a non-empty string")
        # duplicates within one record are merged by exact string
        ids.setdefault(entity, len(ids))

    edges = []
    for triple in relations:
        if (
            not isinstance(triple, list)
            or len(triple) != 3
            or not all(isinstance(part, str) for part in triple)
        ):
            raise SceneGraphError("relation must be a [subject, predicate, object] string triple")
        subj, pred, obj_ = triple
        if subj not in ids or obj_ not in ids:
            raise SceneGraphError("unlisted entity")
        if not pred:
            raise SceneGraphError("empty predicate")
        edges.append(Edge(ids[subj], ids[obj_], pred))

    nodes = tuple(Node(i, label, origin) for label, i in ids.items())
    return SceneGraph(nodes, tuple(edges))


def parse_jsonl(text: str, origin: Origin) -> tuple[list[SceneGraph], list[MalformedRecord]]:
    """Parse a scene-graph JSONL document.

    Blank lines are ignored. A malformed line is skipped and reported with its
    1-based line number; the remaining lines still parse.
    """
    origin = Origin(origin)
    graphs: list[SceneGraph] = []
    malformed: list[MalformedRecord] = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            malformed.append(MalformedRecord(lineno, f"malformed JSON: {exc.msg}"))
            continue
        try:
            graphs.append(_parse_record(obj, origin))
        except SceneGraphError as exc:
            malformed.append(MalformedRecord(lineno, str(exc)))
    for record in malformed:
        logger.warning("skipping line %d: %s", record.line, record.reason)
    return graphs, malformed


def parse_isg_jsonl(text: str) -> list[SceneGraph]:
    return parse_jsonl(text, Origin.ISG)[0]


def parse_tsg_triplets(text: str) -> list[SceneGraph]:
    return parse_jsonl(text, Origin.TSG)[0]


def to_jsonl_record(graph: SceneGraph) -> str:
    """Inverse of the JSONL parser for a single graph."""
    labels = graph.labels()
    record = {
        "entities": labels,
        "relations": [[labels[e.src], e.relation, labels[e.dst]] for e in graph.edges],
    }
    return json.dumps(record, ensure_ascii=False)


def to_jsonl(graphs: Iterable[SceneGraph]) -> str:
    return "".join(to_jsonl_record(g) + "\n" for g in graphs)


# ---------------------------------------------------------------------------
# validation


def validate(graph: SceneGraph, malformed_records: Sequence[MalformedRecord] = ()) -> ValidationReport:
    """Connectivity on the undirected view of the scene edges (super links ignored)."""
    if isinstance(graph, SuperGraph):
        graph = graph.ordinary
    n = graph.num_nodes
    neighbours: list[set[int]] = [set() for _ in range(n)]
    for e in graph.edges:
        if e.src != e.dst:
            neighbours[e.src].add(e.dst)
            neighbours[e.dst].add(e.src)
    isolated = [i for i in range(n) if not neighbours[i]]

    seen = set()
    components = 0
    for start in range(n):
        if start in seen:
            continue
        components += 1
        seen.add(start)
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in neighbours[u] - seen:
                seen.add(v)
                queue.append(v)

    connected = components == 1 and not isolated
    if not connected:
        logger.debug("scene graph is disconnected (%d components)", components)
    return ValidationReport(connected, isolated, list(malformed_records))


# ---------------------------------------------------------------------------
# super-node graphs


def _wire(cls, ordinary: SceneGraph, super_node: SuperNode, relation: str) -> SuperGraph:
    links = tuple(SuperLink(node.id, relation) for node in ordinary.nodes)
    return cls(ordinary, super_node, links)


def _disjoint_union(first: SceneGraph, second: SceneGraph) -> SceneGraph:
    offset = first.num_nodes
    nodes = first.nodes + tuple(Node(n.id + offset, n.label, n.origin) for n in second.nodes)
    edges = first.edges + tuple(Edge(e.src + offset, e.dst + offset, e.relation) for e in second.edges)
    return SceneGraph(nodes, edges)


def build_msg(
    isg: SceneGraph,
    tsg: SceneGraph,
    image_embedding_key: str,
    global_relation: str = GLOBAL_RELATION,
) -> MultimodalSceneGraph:
    """ISG nodes keep their ids, TSG ids are shifted past them."""
    if isg.num_nodes == 0 and tsg.num_nodes == 0:
        raise SceneGraphError("empty MSG")
    ordinary = _disjoint_union(isg, tsg)
    return _wire(MultimodalSceneGraph, ordinary, SuperNode(SuperKind.IMAGE, image_embedding_key), global_relation)


def build_lsg(tsg: SceneGraph, text_embedding_key: str, global_relation: str = GLOBAL_RELATION) -> LinguisticSceneGraph:
    if tsg.num_nodes == 0:
        raise SceneGraphError("empty LSG")
    if any(node.origin is not Origin.TSG for node in tsg.nodes):
        raise SceneGraphError("LSG may only contain TSG nodes")
    return _wire(LinguisticSceneGraph, tsg, SuperNode(SuperKind.TEXT, text_embedding_key), global_relation)


# ---------------------------------------------------------------------------
# serialized graph files


def graph_to_dict(graph: SceneGraph | SuperGraph) -> dict:
    ordinary = graph.ordinary if isinstance(graph, SuperGraph) else graph
    out = {
        "nodes": [{"id": n.id, "label": n.label, "origin": n.origin.value} for n in ordinary.nodes],
        "edges": [{"src": e.src, "dst": e.dst, "relation": e.relation} for e in ordinary.edges],
        "super": None,
    }
    if isinstance(graph, SuperGraph):
        out["super"] = {"kind": graph.super_node.kind.value, "embedding_key": graph.super_node.embedding_key}
    return out


def graph_from_dict(obj: dict) -> SceneGraph | SuperGraph:
    try:
        nodes = tuple(Node(int(n["id"]), n["label"], Origin(n["origin"])) for n in obj["nodes"])
        edges = tuple(Edge(int(e["src"]), int(e["dst"]), e["relation"]) for e in obj["edges"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneGraphError(f"bad serialized graph: {exc}") from exc
    ordinary = SceneGraph(nodes, edges)
    sup = obj.get("super")
    if sup is None:
        return ordinary
    kind = SuperKind(sup["kind"])
    cls = MultimodalSceneGraph if kind is SuperKind.IMAGE else LinguisticSceneGraph
    return _wire(cls, ordinary, SuperNode(kind, sup["embedding_key"]), GLOBAL_RELATION)


def dumps_graph(graph: SceneGraph | SuperGraph) -> str:
    return json.dumps(graph_to_dict(graph), ensure_ascii=False)


def loads_graphs(text: str) -> list[SceneGraph | SuperGraph]:
    """Read a file holding one serialized graph object per line."""
    graphs = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            graphs.append(graph_from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise SceneGraphError(f"line {lineno}: malformed JSON: {exc.msg}") from exc
        except SceneGraphError as exc:
            raise SceneGraphError(f"line {lineno}: {exc}") from exc
    return graphs
