"""
Builders shared by the test modules.
"""

import os

from services.cue_service import CueCandidate
from services.kg_service import KgEdge, KgNode, NodeKind, Relation


def make_node(node_id, kind, embedding, text=None, prototype=None):
    return KgNode(node_id, NodeKind(kind), text or node_id, tuple(embedding), prototype)


def make_edge(head, rel, tail, weight=1.0):
    return KgEdge(head, Relation(rel), tail, weight)


PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TOY_GRAPH_PATH = os.path.join(PROJECT_ROOT, "data", "toy_graph.jsonl")
FIXTURES = os.path.join(PROJECT_ROOT, "tests", "fixtures")


def make_cue(text, cue_type="other", s_emo=0.8, anchors=(), s_sim=0.5, intensities=()):
    return CueCandidate(
        attribute_node=text.replace(" ", "_"),
        text=text,
        prototype=(1.0,),
        s_sim=s_sim,
        s_emo=s_emo,
        fused=0.5 * s_sim + 0.5 * s_emo,
        cue_type=cue_type,
        intensities=tuple(intensities),
        anchors=tuple(anchors),
    )
