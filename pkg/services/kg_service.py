"""
Knowledge Graph Service Module - Multimodal sentiment association graph
Typed scene/object/attribute/emotion nodes joined by CONTAINS, HAS_ATTR and
LEADS_TO edges, validated on every insertion.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from services.errors import (
    DimensionMismatch, DuplicateEdge, DuplicateId, GraphError, GraphFrozen,
    IllegalRelation, PrototypeOnNonAttribute, UnknownEmotionLabel,
    UnknownEndpoint, UnknownNode, WeightOutOfRange
)

logger = logging.getLogger(__name__)

MIKELS_EMOTIONS: Tuple[str, ...] = (
    "amusement", "awe", "contentment", "excitement",
    "anger", "disgust", "fear", "sadness",
)
POSITIVE_EMOTIONS = frozenset({"amusement", "awe", "contentment", "excitement"})
DEFAULT_DIM = 512


class NodeKind(str, Enum):
    SCENE = "scene"
    OBJECT = "object"
    ATTRIBUTE = "attribute"
    EMOTION = "emotion"


class Relation(str, Enum):
    CONTAINS = "CONTAINS"
    HAS_ATTR = "HAS_ATTR"
    LEADS_TO = "LEADS_TO"


# (head kind, relation, tail kind) triples the schema allows
LEGAL_RELATIONS = frozenset({
    (NodeKind.SCENE, Relation.CONTAINS, NodeKind.OBJECT),
    (NodeKind.OBJECT, Relation.HAS_ATTR, NodeKind.ATTRIBUTE),
    (NodeKind.SCENE, Relation.HAS_ATTR, NodeKind.ATTRIBUTE),
    (NodeKind.ATTRIBUTE, Relation.LEADS_TO, NodeKind.EMOTION),
})


def _as_vector(values: Optional[Iterable[float]]) -> Optional[Tuple[float, ...]]:
    if values is None:
        return None
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class KgNode:
    """
    A graph node. Embeddings are stored exactly as ingested (unnormalized).

    Attribute nodes may carry a visual prototype; the text embedding stands
    in for it when absent.
    """
    id: str
    kind: NodeKind
    text: str
    embedding: Tuple[float, ...]
    visual_prototype: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", NodeKind(self.kind))
        object.__setattr__(self, "embedding", _as_vector(self.embedding))
        object.__setattr__(self, "visual_prototype", _as_vector(self.visual_prototype))

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.embedding, dtype=np.float64)

    @property
    def prototype(self) -> np.ndarray:
        """Visual prototype v_a, or the text embedding when none is stored."""
        if self.visual_prototype is not None:
            return np.asarray(self.visual_prototype, dtype=np.float64)
        return self.vector


@dataclass(frozen=True)
class KgEdge:
    head: str
    rel: Relation
    tail: str
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rel", Relation(self.rel))
        object.__setattr__(self, "weight", float(self.weight))

    @property
    def key(self) -> Tuple[str, Relation, str]:
        return (self.head, self.rel, self.tail)


class KnowledgeGraph:
    """
    Typed multimodal graph. Single writer while building; call freeze() once
    construction is done, after which it is safe to share between readers.
    """

    def __init__(self, dim: int = DEFAULT_DIM, emotion_labels: Sequence[str] = MIKELS_EMOTIONS):
        if dim <= 0:
            raise GraphError(f"Embedding dimension must be positive, got {dim}.")
        self.dim = int(dim)
        self.emotion_labels: Tuple[str, ...] = tuple(emotion_labels)
        self.nodes: Dict[str, KgNode] = {}
        self.edges: Dict[Tuple[str, Relation, str], KgEdge] = {}
        self._graph = nx.DiGraph()
        self._frozen = False

    # --- Construction ---

    def add_node(self, node: KgNode) -> "KnowledgeGraph":
        """
        Insert a node after checking id uniqueness, dimension and kind rules.

        Returns:
            KnowledgeGraph: self, for chaining
        """
        self._check_writable()
        if not node.id:
            raise GraphError("Node id must be non-empty.")
        if node.id in self.nodes:
            raise DuplicateId(f"Node id '{node.id}' already exists.")
        if len(node.embedding) != self.dim:
            raise DimensionMismatch(
                f"Node '{node.id}' has a {len(node.embedding)}-d embedding; graph expects {self.dim}."
            )
        if node.visual_prototype is not None and node.kind is not NodeKind.ATTRIBUTE:
            raise PrototypeOnNonAttribute(
                f"Only attribute nodes may carry a visual prototype ('{node.id}' is {node.kind.value})."
            )
        if node.kind is NodeKind.EMOTION and node.text not in self.emotion_labels:
            raise UnknownEmotionLabel(f"Emotion node '{node.id}' has unknown label '{node.text}'.")

        self.nodes[node.id] = node
        self._graph.add_node(node.id, kind=node.kind)
        return self

    def add_edge(self, edge: KgEdge) -> "KnowledgeGraph":
        """
        Insert a typed edge.

        Returns:
            KnowledgeGraph: self, for chaining
        """
        self._check_writable()
        for endpoint in (edge.head, edge.tail):
            if endpoint not in self.nodes:
                raise UnknownEndpoint(f"Edge endpoint '{endpoint}' is not in the graph.")
        if edge.head == edge.tail:
            raise IllegalRelation(f"Self-loop on '{edge.head}' is not allowed.")

        head_kind = self.nodes[edge.head].kind
        tail_kind = self.nodes[edge.tail].kind
        if (head_kind, edge.rel, tail_kind) not in LEGAL_RELATIONS:
            raise IllegalRelation(
                f"{edge.rel.value} is not allowed from {head_kind.value} to {tail_kind.value}."
            )
        if edge.key in self.edges:
            raise DuplicateEdge(f"Edge {edge.head} -{edge.rel.value}-> {edge.tail} already exists.")
        if not math.isfinite(edge.weight) or not 0.0 <= edge.weight <= 1.0:
            raise WeightOutOfRange(f"Edge weight {edge.weight} is outside [0, 1].")

        self.edges[edge.key] = edge
        self._graph.add_edge(edge.head, edge.tail, rel=edge.rel, weight=edge.weight)
        return self

    def freeze(self) -> "KnowledgeGraph":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def _check_writable(self):
        if self._frozen:
            raise GraphFrozen("Graph is frozen; build a new graph to make changes.")

    # --- Lookups ---

    def node(self, node_id: str) -> KgNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"Node '{node_id}' is not in the graph.") from None

    def edge(self, head: str, rel: Relation, tail: str) -> Optional[KgEdge]:
        return self.edges.get((head, Relation(rel), tail))

    def out_edges(self, head: str, rel: Optional[Relation] = None) -> List[KgEdge]:
        """Outgoing edges of a node, ordered by tail id."""
        if head not in self.nodes:
            raise UnknownNode(f"Node '{head}' is not in the graph.")
        found = []
        for tail in sorted(self._graph.successors(head)):
            edge_rel = self._graph.edges[head, tail]["rel"]
            if rel is None or edge_rel is Relation(rel):
                found.append(self.edges[(head, edge_rel, tail)])
        return found

    def nodes_of_kind(self, kind: NodeKind) -> List[KgNode]:
        kind = NodeKind(kind)
        return [n for n in self.nodes.values() if n.kind is kind]

    def emotion_node(self, label: str) -> KgNode:
        """Find the emotion node for a label (matches id or text)."""
        for node in self.nodes_of_kind(NodeKind.EMOTION):
            if node.id == label or node.text == label:
                return node
        raise UnknownNode(f"No emotion node for label '{label}'.")

    def resolve(self, name: str) -> Optional[KgNode]:
        """Resolve a node by id, then by case-insensitive text."""
        if name in self.nodes:
            return self.nodes[name]
        wanted = name.strip().lower()
        for node in self.nodes.values():
            if node.text.lower() == wanted:
                return node
        return None

    def to_networkx(self) -> nx.DiGraph:
        """A copy of the adjacency structure with kind/rel/weight attributes."""
        return self._graph.copy()

    # --- Comparison ---

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.emotion_labels == other.emotion_labels
            and self.nodes == other.nodes
            and set(self.edges.values()) == set(other.edges.values())
        )

    def __repr__(self) -> str:
        return f"KnowledgeGraph(nodes={len(self.nodes)}, edges={len(self.edges)}, dim={self.dim})"

    def stats(self) -> Dict[str, int]:
        """Node counts per kind and edge counts per relation."""
        counts: Dict[str, int] = {kind.value: 0 for kind in NodeKind}
        for node in self.nodes.values():
            counts[node.kind.value] += 1
        for rel in Relation:
            counts[rel.value] = 0
        for edge in self.edges.values():
            counts[edge.rel.value] += 1
        return counts


def add_node(graph: KnowledgeGraph, node: KgNode) -> KnowledgeGraph:
    """Insert a node into the graph (see KnowledgeGraph.add_node)."""
    return graph.add_node(node)


def add_edge(graph: KnowledgeGraph, edge: KgEdge) -> KnowledgeGraph:
    """Insert an edge into the graph (see KnowledgeGraph.add_edge)."""
    return graph.add_edge(edge)
