"""
Database module for the emotion editing pipeline
Handles JSONL knowledge-graph files, subgraph documents and run artifact directories
"""

import json
import logging
import os
from datetime import datetime, timezone
from typing import Any, Callable, Dict, List, Optional, Sequence

from services.errors import GraphError, ParseError
from services.kg_service import (
    MIKELS_EMOTIONS, KgEdge, KgNode, KnowledgeGraph, NodeKind, Relation
)

logger = logging.getLogger(__name__)

# Canonical JSON settings shared by every writer
JSON_KW = dict(sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# Record conversion

def node_to_record(node: KgNode) -> Dict[str, Any]:
    """Convert a node to its JSONL record."""
    record = {
        "kind": "node",
        "id": node.id,
        "type": node.kind.value,
        "text": node.text,
        "embedding": list(node.embedding),
    }
    if node.visual_prototype is not None:
        record["visual_prototype"] = list(node.visual_prototype)
    return record


def edge_to_record(edge: KgEdge) -> Dict[str, Any]:
    """Convert an edge to its JSONL record."""
    return {
        "kind": "edge",
        "head": edge.head,
        "rel": edge.rel.value,
        "tail": edge.tail,
        "weight": edge.weight,
    }


def record_to_node(record: Dict[str, Any]) -> KgNode:
    """Build a node from a JSONL record, raising ParseError on bad fields."""
    try:
        kind = NodeKind(record["type"])
        return KgNode(
            id=str(record["id"]),
            kind=kind,
            text=str(record["text"]),
            embedding=record["embedding"],
            visual_prototype=record.get("visual_prototype"),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ParseError(f"Malformed node record: {e}") from None


def record_to_edge(record: Dict[str, Any]) -> KgEdge:
    """Build an edge from a JSONL record, raising ParseError on bad fields."""
    try:
        return KgEdge(
            head=str(record["head"]),
            rel=Relation(record["rel"]),
            tail=str(record["tail"]),
            weight=record.get("weight", 1.0),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ParseError(f"Malformed edge record: {e}") from None


def read_records(path: str) -> List[Dict[str, Any]]:
    """Read a JSONL file; blank lines are skipped, bad UTF-8 or JSON raises ParseError with its line number."""
    records = []
    with open(path, "rb") as f:
        for line_no, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
                if not line.strip():
                    continue
                record = json.loads(line)
            except UnicodeDecodeError as e:
                raise ParseError(f"Invalid UTF-8 at byte {e.start}").at_line(line_no) from None
            except json.JSONDecodeError as e:
                raise ParseError(f"Invalid JSON: {e.msg}").at_line(line_no) from None
            if not isinstance(record, dict):
                raise ParseError("Record must be a JSON object.").at_line(line_no)
            record["_line"] = line_no
            records.append(record)
    return records


# Graph persistence

def replay_records(
    records: Sequence[Dict[str, Any]],
    dim: Optional[int] = None,
    emotion_labels: Sequence[str] = MIKELS_EMOTIONS,
    fill_embedding: Optional[Callable[[str], Sequence[float]]] = None,
) -> KnowledgeGraph:
    """
    Replay node/edge records in order, like calling add_node/add_edge.

    Args:
        records: parsed records, each optionally carrying a "_line" number
        dim: embedding dimension; inferred from the first node when omitted
        emotion_labels: allowed emotion labels
        fill_embedding: callback used for node records without an embedding

    Returns:
        KnowledgeGraph: the (unfrozen) graph
    """
    graph = None
    for index, record in enumerate(records, start=1):
        line_no = record.get("_line", index)
        try:
            kind = record.get("kind")
            if kind == "node":
                if "embedding" not in record and fill_embedding is not None:
                    record = dict(record, embedding=list(fill_embedding(str(record.get("text", "")))))
                node = record_to_node(record)
                if graph is None:
                    graph = KnowledgeGraph(dim or len(node.embedding), emotion_labels)
                graph.add_node(node)
            elif kind == "edge":
                if graph is None:
                    graph = KnowledgeGraph(dim or 1, emotion_labels)
                graph.add_edge(record_to_edge(record))
            else:
                raise ParseError(f"Unknown record kind '{kind}'.")
        except GraphError as e:
            raise e.at_line(line_no)
    if graph is None:
        graph = KnowledgeGraph(dim or 1, emotion_labels)
    return graph


def load_graph(
    path: str,
    dim: Optional[int] = None,
    emotion_labels: Sequence[str] = MIKELS_EMOTIONS,
) -> KnowledgeGraph:
    """
    Load a knowledge graph from a JSONL file.

    Returns:
        KnowledgeGraph: frozen graph, equal to replaying the file's records in order
    """
    graph = replay_records(read_records(path), dim=dim, emotion_labels=emotion_labels)
    logger.info("Loaded graph from %s: %d nodes, %d edges", path, len(graph.nodes), len(graph.edges))
    return graph.freeze()


def save_graph(graph: KnowledgeGraph, path: str) -> None:
    """Write a graph as canonical JSONL: nodes then edges, in insertion order."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for node in graph.nodes.values():
            f.write(json.dumps(node_to_record(node), **JSON_KW) + "\n")
        for edge in graph.edges.values():
            f.write(json.dumps(edge_to_record(edge), **JSON_KW) + "\n")


# Generic JSON documents

def write_json(path: str, payload: Any) -> str:
    """Write a JSON document (pretty-printed, keys sorted) and return its path."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path


def read_json(path: str) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


# Run artifact directories

def create_run_dir(output_dir: str, run_name: Optional[str] = None) -> str:
    """Create <output_dir>/<run_name or UTC timestamp>/ and return it."""
    name = run_name or datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    run_dir = os.path.join(output_dir, name)
    os.makedirs(run_dir, exist_ok=True)
    return run_dir


def write_run_index(run_dir: str, entries: List[Dict[str, Any]], summary: Dict[str, Any]) -> str:
    """Write the manifest index JSON of a run directory."""
    return write_json(os.path.join(run_dir, "index.json"), {"items": entries, "summary": summary})
