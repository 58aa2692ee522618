"""
Retrieval Service Module - Reasoning paths over the knowledge graph
Enumerates schema-typed paths from scenes/objects to emotions and falls back to
nearest neighbours in embedding space when a start node has no direct path.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from database import node_to_record, read_json, record_to_node, write_json
from services.errors import EmoKgError, WrongNodeKind, ZeroEmbedding
from services.kg_service import KgEdge, KgNode, KnowledgeGraph, NodeKind, Relation

logger = logging.getLogger(__name__)

DEFAULT_K = 5
ZERO_NORM = 1e-12

# Relation sequences a reasoning path may follow
PATH_GRAMMAR: Tuple[Tuple[Relation, ...], ...] = (
    (Relation.CONTAINS, Relation.HAS_ATTR, Relation.LEADS_TO),
    (Relation.HAS_ATTR, Relation.LEADS_TO),
)
START_KINDS = (NodeKind.SCENE, NodeKind.OBJECT)


@dataclass(frozen=True)
class ReasoningPath:
    nodes: Tuple[str, ...]
    edges: Tuple[KgEdge, ...]
    completed_from: Optional[str] = None
    # original starts this path stands in for, in first-seen order
    substitutes_for: Tuple[str, ...] = ()

    def __post_init__(self):
        value = self.substitutes_for
        object.__setattr__(self, "substitutes_for", (value,) if isinstance(value, str) else tuple(value or ()))

    @property
    def relations(self) -> Tuple[Relation, ...]:
        return tuple(e.rel for e in self.edges)

    @property
    def sort_key(self) -> Tuple[int, Tuple[str, ...]]:
        return (len(self.nodes), self.nodes)

    @property
    def route(self) -> Tuple[Tuple[str, ...], Tuple[KgEdge, ...]]:
        return (self.nodes, self.edges)

    def tagged(self, neighbor: str, start: str) -> "ReasoningPath":
        return ReasoningPath(self.nodes, self.edges, completed_from=neighbor, substitutes_for=(start,))

    def merged(self, other: "ReasoningPath") -> "ReasoningPath":
        """Same route reached from several starts; a direct hit clears the neighbour tag."""
        completed_from = self.completed_from if self.completed_from == other.completed_from else None
        substitutes = tuple(dict.fromkeys(self.substitutes_for + other.substitutes_for))
        return ReasoningPath(self.nodes, self.edges, completed_from, substitutes)

    def to_dict(self) -> Dict:
        return {
            "nodes": list(self.nodes),
            "edges": [[e.head, e.rel.value, e.tail, e.weight] for e in self.edges],
            "completed_from": self.completed_from,
            "substitutes_for": list(self.substitutes_for),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ReasoningPath":
        edges = tuple(KgEdge(h, Relation(r), t, w) for h, r, t, w in data["edges"])
        return cls(
            tuple(data["nodes"]), edges,
            completed_from=data.get("completed_from"),
            substitutes_for=data.get("substitutes_for") or (),
        )


@dataclass(frozen=True)
class RetrievalQuery:
    starts: Tuple[str, ...]
    targets: Tuple[str, ...]
    k: int = DEFAULT_K

    def validate(self, graph: KnowledgeGraph):
        if not self.starts:
            raise EmoKgError("Retrieval query needs at least one start node.")
        if self.k < 1:
            raise EmoKgError(f"k must be >= 1, got {self.k}.")
        for target in self.targets:
            if graph.node(target).kind is not NodeKind.EMOTION:
                raise WrongNodeKind(f"Target '{target}' is not an emotion node.")


@dataclass(frozen=True)
class Subgraph:
    paths: Tuple[ReasoningPath, ...] = field(default_factory=tuple)

    @property
    def node_ids(self) -> List[str]:
        """Projected nodes in first-seen path order."""
        seen: Dict[str, None] = {}
        for path in self.paths:
            for node_id in path.nodes:
                seen.setdefault(node_id, None)
        return list(seen)

    @property
    def edges(self) -> List[KgEdge]:
        seen: Dict[KgEdge, None] = {}
        for path in self.paths:
            for edge in path.edges:
                seen.setdefault(edge, None)
        return list(seen)

    def __len__(self) -> int:
        return len(self.paths)


# Similarity helpers

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; raises ZeroEmbedding instead of silently returning 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a < ZERO_NORM or norm_b < ZERO_NORM:
        raise ZeroEmbedding("Cannot compare a zero-norm embedding.")
    return float(np.dot(a, b) / (norm_a * norm_b))


# Path enumeration

def _check_start(graph: KnowledgeGraph, s: str) -> KgNode:
    node = graph.node(s)
    if node.kind not in START_KINDS:
        raise WrongNodeKind(f"Start node '{s}' is a {node.kind.value}; expected scene or object.")
    return node


def paths(graph: KnowledgeGraph, s: str, t: str) -> List[ReasoningPath]:
    """
    All schema-conforming paths from s to emotion t.

    Args:
        graph: knowledge graph
        s: scene or object node id
        t: emotion node id

    Returns:
        list: paths ordered by (length, node ids)
    """
    _check_start(graph, s)
    if graph.node(t).kind is not NodeKind.EMOTION:
        raise WrongNodeKind(f"Target '{t}' is not an emotion node.")

    found = []

    def walk(node_id: str, nodes: Tuple[str, ...], edges: Tuple[KgEdge, ...], remaining: Tuple[Relation, ...]):
        if not remaining:
            if node_id == t:
                found.append(ReasoningPath(nodes, edges))
            return
        for edge in graph.out_edges(node_id, remaining[0]):
            if edge.tail in nodes:
                continue
            walk(edge.tail, nodes + (edge.tail,), edges + (edge,), remaining[1:])

    for sequence in PATH_GRAMMAR:
        walk(s, (s,), (), sequence)

    return sorted(set(found), key=lambda p: p.sort_key)


def knn(graph: KnowledgeGraph, s: str, k: int) -> List[str]:
    """
    The k same-kind nodes most cosine-similar to s (s excluded), ties by id.
    """
    if k < 1:
        raise EmoKgError(f"k must be >= 1, got {k}.")
    anchor = graph.node(s)
    if np.linalg.norm(anchor.vector) < ZERO_NORM:
        raise ZeroEmbedding(f"Node '{s}' has a zero-norm embedding.")

    scored = []
    for other in graph.nodes_of_kind(anchor.kind):
        if other.id == s:
            continue
        try:
            sim = cosine_similarity(anchor.vector, other.vector)
        except ZeroEmbedding:
            raise ZeroEmbedding(f"Node '{other.id}' has a zero-norm embedding.") from None
        scored.append((-sim, other.id))
    scored.sort()
    return [node_id for _, node_id in scored[:k]]


def completed_paths(graph: KnowledgeGraph, s: str, t: str, k: int = DEFAULT_K) -> List[ReasoningPath]:
    """
    Direct paths when any exist, otherwise the union of the k nearest
    neighbours' paths, each tagged with the neighbour it came from.
    """
    direct = paths(graph, s, t)
    if direct:
        return direct

    completed: List[ReasoningPath] = []
    for neighbor in knn(graph, s, k):
        for path in paths(graph, neighbor, t):
            tagged = path.tagged(neighbor, s)
            if tagged not in completed:
                completed.append(tagged)
    if completed:
        logger.debug("Start '%s' has no path to '%s'; completed with %d neighbour paths", s, t, len(completed))
    return completed


def retrieve_subgraph(graph: KnowledgeGraph, query: RetrievalQuery) -> Subgraph:
    """Union of completed paths over every (start, target) pair, one entry per route."""
    query.validate(graph)
    collected: Dict[Tuple, ReasoningPath] = {}
    for s in query.starts:
        for t in query.targets:
            for path in completed_paths(graph, s, t, query.k):
                seen = collected.get(path.route)
                collected[path.route] = path if seen is None else seen.merged(path)
    logger.info(
        "Retrieved %d paths for %d starts x %d targets", len(collected), len(query.starts), len(query.targets)
    )
    return Subgraph(tuple(collected.values()))


def resolve_starts(graph: KnowledgeGraph, names: Iterable[str]) -> List[str]:
    """Map scene/object names or ids onto start node ids, skipping unknown names."""
    resolved = []
    for name in names:
        node = graph.resolve(name)
        if node is None or node.kind not in START_KINDS:
            logger.warning("Start '%s' does not match a scene or object node; skipped", name)
            continue
        if node.id not in resolved:
            resolved.append(node.id)
    return resolved


def resolve_targets(graph: KnowledgeGraph, labels: Sequence[str]) -> List[str]:
    """Map emotion labels onto emotion node ids."""
    return [graph.emotion_node(label).id for label in labels]


def subgraph_to_dict(graph: KnowledgeGraph, subgraph: Subgraph) -> Dict:
    """Serialize a subgraph together with the node records it projects."""
    return {
        "dim": graph.dim,
        "emotion_labels": list(graph.emotion_labels),
        "nodes": [node_to_record(graph.node(n)) for n in subgraph.node_ids],
        "paths": [p.to_dict() for p in subgraph.paths],
    }


def subgraph_from_dict(data: Dict) -> Tuple[KnowledgeGraph, Subgraph]:
    """Restore the projection graph and the path set of a subgraph document."""
    graph = KnowledgeGraph(data["dim"], data["emotion_labels"])
    for record in data["nodes"]:
        graph.add_node(record_to_node(record))
    subgraph = Subgraph(tuple(ReasoningPath.from_dict(p) for p in data["paths"]))
    for edge in subgraph.edges:
        if edge.key not in graph.edges:
            graph.add_edge(edge)
    return graph.freeze(), subgraph


def save_subgraph(graph: KnowledgeGraph, subgraph: Subgraph, path: str) -> str:
    return write_json(path, subgraph_to_dict(graph, subgraph))


def load_subgraph(path: str) -> Tuple[KnowledgeGraph, Subgraph]:
    return subgraph_from_dict(read_json(path))
