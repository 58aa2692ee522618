"""
Cue Service Module - Emotion cue scoring, selection, filtering and prompt compilation
Turns a retrieved subgraph into a target-emotion editing instruction.
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.errors import (
    ClientError, EmoKgError, EmptyEvidence, EmptySubgraph, InvariantViolation,
    OutOfRange, ShapeMismatch, UnknownNode, WrongNodeKind
)
from services.kg_service import POSITIVE_EMOTIONS, KnowledgeGraph, NodeKind, Relation
from services.prompt_templates import FORBIDDEN_ENTITIES, SYSTEM_PROMPT, render_user_prompt
from services.retrieval_service import ReasoningPath, Subgraph, cosine_similarity

logger = logging.getLogger(__name__)

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(PROJECT_ROOT, "data")
CONFLICT_RULES_PATH = os.path.join(DATA_DIR, "conflict_rules.json")
CUE_LEXICON_PATH = os.path.join(DATA_DIR, "cue_lexicon.json")

DEFAULT_LAMBDA = 0.5
DEFAULT_K_CUES = 15
DEFAULT_TAU = 0.6

# Cue types that attach to objects; lighting, atmosphere and effect cues are global
OBJECT_CUE_TYPES = frozenset({"color", "material", "shape", "posture", "camera-view", "other"})
TOXIC_SUBSTITUTES = {"trash": "gift box", "garbage": "wrapped package", "litter": "clean lidded bin"}
MAX_OBJECT_CUES = 2
MAX_GLOBAL_CUES = 2
MAX_EFFECTS = 2
NEUTRAL_OBJECT = "object"
NEUTRAL_SCENE = "setting"

Targets = Union[str, Sequence[str]]


def tokens(text: str) -> Tuple[str, ...]:
    """Lowercase word tokens (hyphenated words kept whole)."""
    return tuple(re.findall(r"[a-z0-9][a-z0-9\-]*", (text or "").lower()))


def _as_targets(targets: Targets) -> Tuple[str, ...]:
    return (targets,) if isinstance(targets, str) else tuple(targets)


# --- Rule tables ---

@dataclass(frozen=True)
class ConflictRule:
    """Fires when a cue token and an object token both hit the rule's token sets."""
    attribute_pattern: FrozenSet[str]
    object_class_pattern: FrozenSet[str]
    reason: str = ""

    def __post_init__(self):
        for name in ("attribute_pattern", "object_class_pattern"):
            value = getattr(self, name)
            values = [value] if isinstance(value, str) else list(value)
            object.__setattr__(self, name, frozenset(v.strip().lower() for v in values))

    def fires(self, cue_text: str, obj: "SceneObject") -> bool:
        return bool(self.attribute_pattern & set(tokens(cue_text))) and bool(self.object_class_pattern & obj.tokens)


def load_conflict_rules(path: Optional[str] = None) -> List[ConflictRule]:
    with open(path or CONFLICT_RULES_PATH, encoding="utf-8") as f:
        rows = json.load(f)
    return [ConflictRule(r["attribute"], r["object"], r.get("reason", "")) for r in rows]


def load_cue_lexicon(path: Optional[str] = None) -> Dict[str, Tuple[str, ...]]:
    with open(path or CUE_LEXICON_PATH, encoding="utf-8") as f:
        raw = json.load(f)
    return {cue_type: tuple(w.lower() for w in words) for cue_type, words in raw.items()}


_default_lexicon: Optional[Dict[str, Tuple[str, ...]]] = None


def default_lexicon() -> Dict[str, Tuple[str, ...]]:
    global _default_lexicon
    if _default_lexicon is None:
        _default_lexicon = load_cue_lexicon()
    return _default_lexicon


def classify_cue(text: str, lexicon: Optional[Dict[str, Tuple[str, ...]]] = None) -> str:
    """Cue type by whole-phrase match first, then by the first matching token."""
    lexicon = lexicon if lexicon is not None else default_lexicon()
    phrase = " ".join(tokens(text))
    for cue_type, words in lexicon.items():
        if phrase in words:
            return cue_type
    for token in tokens(text):
        for cue_type, words in lexicon.items():
            if token in words:
                return cue_type
    return "other"


# --- Scene structure ---

@dataclass(frozen=True)
class SceneObject:
    name: str
    attributes: Tuple[str, ...] = ()
    node_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))

    @property
    def tokens(self) -> FrozenSet[str]:
        found = set(tokens(self.name))
        for attribute in self.attributes:
            found.update(tokens(attribute))
        return frozenset(found)

    def matches(self, anchors: Iterable[str]) -> bool:
        anchors = set(anchors)
        return self.name.lower() in anchors or (self.node_id is not None and self.node_id.lower() in anchors)


@dataclass(frozen=True)
class SceneStructure:
    """Objects (with their current attributes), scene label and original description."""
    objects: Tuple[SceneObject, ...] = ()
    label: Optional[str] = None
    o_prompt: str = ""
    attributes: Tuple[str, ...] = ()
    fallback_atmosphere: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not self.objects and not self.label:
            raise EmoKgError("A scene needs at least one object or a scene label.")

    @property
    def existing_attributes(self) -> FrozenSet[Tuple[str, ...]]:
        found = {tokens(a) for a in self.attributes}
        for obj in self.objects:
            found.update(tokens(a) for a in obj.attributes)
        return frozenset(found)

    @property
    def start_names(self) -> List[str]:
        """Names used to look up retrieval start nodes."""
        names = [self.label] if self.label else []
        for obj in self.objects:
            names.append(obj.node_id or obj.name)
        return names

    @classmethod
    def from_dict(cls, data: Dict) -> "SceneStructure":
        objects = tuple(
            SceneObject(o["name"], tuple(o.get("attributes", ())), o.get("node_id"))
            for o in data.get("objects", ())
        )
        return cls(
            objects=objects,
            label=data.get("scene") or data.get("label"),
            o_prompt=data.get("o_prompt", ""),
            attributes=tuple(data.get("attributes", ())),
            fallback_atmosphere=data.get("fallback_atmosphere"),
        )

    def to_dict(self) -> Dict:
        return {
            "objects": [
                {"name": o.name, "attributes": list(o.attributes), "node_id": o.node_id} for o in self.objects
            ],
            "scene": self.label,
            "o_prompt": self.o_prompt,
            "attributes": list(self.attributes),
            "fallback_atmosphere": self.fallback_atmosphere,
        }

    @classmethod
    def from_subgraph(cls, graph: KnowledgeGraph, subgraph: Subgraph) -> "SceneStructure":
        """
        Rebuild the scene from the starts of a stored subgraph: the first
        scene start becomes the label, object starts become objects.
        Completed paths count for the start they substitute.
        """
        starts: Dict[str, None] = {}
        for path in subgraph.paths:
            for start in path.substitutes_for or (path.nodes[0],):
                starts.setdefault(start, None)
        label, objects = None, []
        for start in starts:
            node = graph.nodes.get(start)
            if node is None:
                continue
            if node.kind is NodeKind.SCENE and label is None:
                label = node.text
            elif node.kind is NodeKind.OBJECT:
                objects.append(SceneObject(node.text, node_id=node.id))
        if not objects and not label:
            raise EmptySubgraph("The subgraph names no scene or object start.")
        return cls(objects=tuple(objects), label=label)


# --- Cue containers ---

@dataclass(frozen=True)
class CueCandidate:
    attribute_node: str
    text: str
    prototype: Tuple[float, ...]
    s_sim: float
    s_emo: float
    fused: float
    source_path: Optional[ReasoningPath] = None
    cue_type: str = "other"
    intensities: Tuple[Tuple[str, float], ...] = ()
    anchors: Tuple[str, ...] = ()

    def intensity_for(self, targets: Targets) -> float:
        """Intensity for the strongest of the given targets (s_emo when none was scored)."""
        wanted = set(_as_targets(targets))
        values = [value for label, value in self.intensities if label in wanted]
        return max(values) if values else self.s_emo

    def to_dict(self) -> Dict:
        return {
            "attribute_node": self.attribute_node,
            "text": self.text,
            "cue_type": self.cue_type,
            "s_sim": self.s_sim,
            "s_emo": self.s_emo,
            "fused": self.fused,
            "intensities": {label: value for label, value in self.intensities},
            "source_path": self.source_path.to_dict() if self.source_path else None,
        }


@dataclass(frozen=True)
class CuePool:
    cues: Tuple[CueCandidate, ...]
    lam: float
    K: int

    def __len__(self) -> int:
        return len(self.cues)


@dataclass(frozen=True)
class CueBank:
    admitted: Tuple[CueCandidate, ...] = ()
    rejected: Tuple[Tuple[CueCandidate, str], ...] = ()

    def to_dict(self) -> Dict:
        return {
            "admitted": [c.to_dict() for c in self.admitted],
            "rejected": [{"cue": c.to_dict(), "reason": reason} for c, reason in self.rejected],
        }


@dataclass(frozen=True)
class EmotionPrompt:
    text: str
    evidence: Tuple[str, ...] = ()
    target_emotions: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "target_emotions", _as_targets(self.target_emotions))
        if not self.text or not self.text.strip():
            raise InvariantViolation("Compiled prompt is empty.")
        lowered = self.text.lower()
        for label in self.target_emotions:
            if label.lower() in lowered:
                raise InvariantViolation(f"Compiled prompt mentions the target emotion '{label}'.")

    @property
    def target_emotion(self) -> str:
        return self.target_emotions[0] if self.target_emotions else ""

    def to_dict(self) -> Dict:
        return {"text": self.text, "evidence": list(self.evidence), "target_emotions": list(self.target_emotions)}

    @classmethod
    def from_dict(cls, data: Dict) -> "EmotionPrompt":
        return cls(data["text"], tuple(data.get("evidence", ())), tuple(data.get("target_emotions", ())))


# --- Scoring and selection ---

def _leads_to_weight(graph: KnowledgeGraph, attribute_id: str, label: str) -> float:
    try:
        emotion = graph.emotion_node(label)
    except UnknownNode:
        return 0.0
    edge = graph.edge(attribute_id, Relation.LEADS_TO, emotion.id)
    return edge.weight if edge is not None else 0.0


def _anchors(graph: KnowledgeGraph, path: Optional[ReasoningPath]) -> Tuple[str, ...]:
    if path is None:
        return ()
    found = []
    for node_id in path.nodes:
        node = graph.nodes.get(node_id)
        if node is not None and node.kind in (NodeKind.SCENE, NodeKind.OBJECT):
            found.extend([node.id.lower(), node.text.lower()])
    for start in path.substitutes_for:
        found.append(start.lower())
        original = graph.nodes.get(start)
        if original is not None:
            found.append(original.text.lower())
    return tuple(dict.fromkeys(found))


def score_cue(
    graph: KnowledgeGraph,
    attribute_id: str,
    image_embedding,
    targets: Targets,
    lam: float = DEFAULT_LAMBDA,
    intensity=None,
    source_path: Optional[ReasoningPath] = None,
    lexicon: Optional[Dict[str, Tuple[str, ...]]] = None,
) -> CueCandidate:
    """
    Score one attribute cue: S(c) = lam * s_sim + (1 - lam) * s_emo.

    Args:
        graph: graph holding the attribute and its LEADS_TO edges
        attribute_id: attribute node id
        image_embedding: source image embedding
        targets: target emotion label(s); s_emo is the maximum over them
        lam: fusion weight in [0, 1]
        intensity: optional provider with intensity(cue_text, emotion) -> [0, 1]
        source_path: path the cue was found on

    Returns:
        CueCandidate: the scored cue
    """
    if not 0.0 <= lam <= 1.0:
        raise OutOfRange(f"lambda must lie in [0, 1], got {lam}.")
    node = graph.node(attribute_id)
    if node.kind is not NodeKind.ATTRIBUTE:
        raise WrongNodeKind(f"'{attribute_id}' is not an attribute node.")

    image_embedding = np.asarray(image_embedding, dtype=np.float64)
    prototype = node.prototype
    if image_embedding.shape != prototype.shape:
        raise ShapeMismatch(
            f"Image embedding has shape {image_embedding.shape}; prototype of '{node.id}' has {prototype.shape}."
        )
    s_sim = cosine_similarity(image_embedding, prototype)

    intensities = []
    for label in _as_targets(targets):
        if intensity is not None:
            value = float(intensity.intensity(node.text, label))
            if not 0.0 <= value <= 1.0:
                raise OutOfRange(f"Intensity provider returned {value} for '{node.text}'.")
        else:
            value = _leads_to_weight(graph, node.id, label)
        intensities.append((label, value))
    s_emo = max((v for _, v in intensities), default=0.0)

    return CueCandidate(
        attribute_node=node.id,
        text=node.text,
        prototype=tuple(prototype.tolist()),
        s_sim=s_sim,
        s_emo=s_emo,
        fused=lam * s_sim + (1.0 - lam) * s_emo,
        source_path=source_path,
        cue_type=classify_cue(node.text, lexicon),
        intensities=tuple(intensities),
        anchors=_anchors(graph, source_path),
    )


def select_cues(
    graph: KnowledgeGraph,
    subgraph: Subgraph,
    image_embedding,
    targets: Targets,
    lam: float = DEFAULT_LAMBDA,
    K: int = DEFAULT_K_CUES,
    intensity=None,
    lexicon: Optional[Dict[str, Tuple[str, ...]]] = None,
) -> CuePool:
    """
    Score every attribute on the subgraph's paths and keep the top K.

    Raises:
        EmptySubgraph: when there are no paths or no attribute nodes to score
    """
    if K < 1:
        raise OutOfRange(f"K must be >= 1, got {K}.")
    if not subgraph.paths:
        raise EmptySubgraph("Subgraph has no reasoning paths.")

    scored: Dict[str, CueCandidate] = {}
    for path in subgraph.paths:
        for node_id in path.nodes:
            if node_id in scored or graph.node(node_id).kind is not NodeKind.ATTRIBUTE:
                continue
            scored[node_id] = score_cue(
                graph, node_id, image_embedding, targets, lam,
                intensity=intensity, source_path=path, lexicon=lexicon,
            )
    if not scored:
        raise EmptySubgraph("Subgraph paths contain no attribute nodes.")

    ranked = sorted(scored.values(), key=lambda c: (-c.fused, c.text, c.attribute_node))
    logger.info("Scored %d cues, keeping top %d", len(ranked), min(K, len(ranked)))
    return CuePool(tuple(ranked[:K]), lam, K)


# --- Calibration and filtering ---

def calibrate(pool: CuePool, scene: SceneStructure, rules: Sequence[ConflictRule]) -> CuePool:
    """
    Drop cues that conflict with every object in the scene or that repeat an
    attribute the scene already has. Order is preserved.
    """
    existing = scene.existing_attributes
    kept = []
    for cue in pool.cues:
        if tokens(cue.text) in existing:
            logger.debug("Cue '%s' duplicates an existing attribute; dropped", cue.text)
            continue
        if scene.objects and all(any(r.fires(cue.text, obj) for r in rules) for obj in scene.objects):
            logger.debug("Cue '%s' conflicts with every object in the scene; dropped", cue.text)
            continue
        kept.append(cue)
    return CuePool(tuple(kept), pool.lam, pool.K)


def attachment(cue: CueCandidate, scene: SceneStructure) -> Tuple[SceneObject, ...]:
    """
    Scene objects a cue will be attached to: the objects on its path, else the
    primary (first) object. Global cue types attach to no object.
    """
    if cue.cue_type not in OBJECT_CUE_TYPES:
        return ()
    matched = tuple(obj for obj in scene.objects if obj.matches(cue.anchors))
    return matched or scene.objects[:1]


def filter_bank(
    pool: CuePool,
    targets: Targets,
    tau: float,
    scene: SceneStructure,
    rules: Sequence[ConflictRule],
) -> CueBank:
    """
    Intensity check (s_emo >= tau for at least one target) and logic
    verification (no conflict rule fires on an attached object).
    """
    if not 0.0 <= tau <= 1.0:
        raise OutOfRange(f"tau must lie in [0, 1], got {tau}.")
    admitted, rejected = [], []
    for cue in pool.cues:
        if cue.intensity_for(targets) < tau:
            rejected.append((cue, "below_tau"))
        elif any(r.fires(cue.text, obj) for obj in attachment(cue, scene) for r in rules):
            rejected.append((cue, "conflict"))
        else:
            admitted.append(cue)
    logger.info("Cue bank: %d admitted, %d rejected (tau=%.2f)", len(admitted), len(rejected), tau)
    return CueBank(tuple(admitted), tuple(rejected))


# --- Prompt compilation ---

def _article(phrase: str) -> str:
    return "an" if phrase[:1].lower() in "aeiou" else "a"


def _join_phrases(phrases: List[str]) -> str:
    if len(phrases) <= 2:
        return " and ".join(phrases)
    return ", ".join(phrases[:-1]) + " and " + phrases[-1]


def _pick_diverse(cues: List[CueCandidate], limit: int) -> List[CueCandidate]:
    """Up to `limit` cues, one per cue type first, then by bank order."""
    chosen: List[CueCandidate] = []
    seen_types = set()
    for cue in cues:
        if len(chosen) < limit and cue.cue_type not in seen_types:
            chosen.append(cue)
            seen_types.add(cue.cue_type)
    for cue in cues:
        if len(chosen) < limit and cue not in chosen:
            chosen.append(cue)
    return [c for c in cues if c in chosen]


def _noun_phrase(noun: str, cues: List[CueCandidate]) -> str:
    adjectives = [c.text for c in cues if len(c.text.split()) == 1]
    with_phrases = [c.text for c in cues if len(c.text.split()) > 1]
    head = f"{', '.join(adjectives)} {noun}" if adjectives else noun
    phrase = f"{_article(head)} {head}"
    if with_phrases:
        phrase += " with " + " and ".join(with_phrases)
    return phrase


def _scrub(text: str, labels: Sequence[str]) -> str:
    """Drop the words of `text` that contain a target label ("stranger" holds "anger")."""
    kept = [w for w in text.split() if not any(label in w.lower() for label in labels)]
    if len(kept) < len(text.split()):
        logger.warning("'%s' contains a target emotion label; reworded", text)
    return " ".join(kept)


def _compile_template(bank: CueBank, scene: SceneStructure, targets: Tuple[str, ...]) -> EmotionPrompt:
    labels = [t.lower() for t in targets]
    usable = []
    for cue in bank.admitted:
        if any(label in cue.text.lower() for label in labels):
            logger.warning("Cue '%s' names the target emotion; skipped", cue.text)
            continue
        usable.append(cue)
    positive = any(t in POSITIVE_EMOTIONS for t in targets)
    used: List[CueCandidate] = []
    scene_label = (_scrub(scene.label, labels) or NEUTRAL_SCENE) if scene.label else None

    # Step 1 and 2: attribute enhancement per object, toxic objects cleaned up
    object_phrases = []
    for obj in scene.objects:
        noun = obj.name
        if positive and noun.lower() in TOXIC_SUBSTITUTES:
            noun = TOXIC_SUBSTITUTES[noun.lower()]
        noun = _scrub(noun, labels) or NEUTRAL_OBJECT
        attached = [c for c in usable if obj in attachment(c, scene)]
        chosen = _pick_diverse(attached, MAX_OBJECT_CUES)
        used.extend(c for c in chosen if c not in used)
        object_phrases.append(_noun_phrase(noun, chosen))

    if object_phrases:
        subject = _join_phrases(object_phrases)
        if scene_label:
            subject += f" in {_article(scene_label)} {scene_label}"
    elif scene_label:
        # no objects: object-type cues describe the scene itself
        chosen = _pick_diverse([c for c in usable if c.cue_type in OBJECT_CUE_TYPES], MAX_OBJECT_CUES)
        used.extend(chosen)
        subject = _noun_phrase(scene_label, chosen)
    else:
        subject = scene.o_prompt
    parts = [subject]

    # Step 3: global atmosphere, no new entities
    lighting = [c for c in usable if c.cue_type == "lighting"][:MAX_GLOBAL_CUES]
    atmosphere = [c for c in usable if c.cue_type == "atmosphere"][:MAX_GLOBAL_CUES]
    if lighting:
        parts.append(f"under {', '.join(c.text for c in lighting)} lighting")
    if atmosphere:
        mood = ", ".join(c.text for c in atmosphere)
        parts.append(f"with {_article(mood)} {mood} atmosphere")
    mood = _scrub(scene.fallback_atmosphere or "", labels)
    if not lighting and not atmosphere and mood:
        parts.append(f"with {_article(mood)} {mood} atmosphere")

    # Step 4: at most two subtle effects
    effects = [c for c in usable if c.cue_type == "effect"][:MAX_EFFECTS]
    if effects:
        parts.append("with " + " and ".join(c.text for c in effects))

    used.extend(lighting + atmosphere + effects)
    return EmotionPrompt(", ".join(parts), tuple(c.attribute_node for c in used), targets)


def plain_prompt(scene: SceneStructure, targets: Targets) -> EmotionPrompt:
    """The scene's own description with no emotion cues; the object list when o_prompt is empty."""
    targets = _as_targets(targets)
    text = _scrub(scene.o_prompt, [t.lower() for t in targets])
    if not text:
        return _compile_template(CueBank(), replace(scene, fallback_atmosphere=None), targets)
    return EmotionPrompt(text, (), targets)


def validate_lmm_response(text: str, scene: SceneStructure, bank: CueBank, targets: Tuple[str, ...]) -> None:
    """Reject responses that name the emotion or introduce forbidden entities."""
    lowered = text.lower()
    for label in targets:
        if label.lower() in lowered:
            raise InvariantViolation(f"LMM response mentions the target emotion '{label}'.")

    allowed = set(tokens(scene.o_prompt)) | set(tokens(scene.label or ""))
    for obj in scene.objects:
        allowed |= obj.tokens
    for cue in bank.admitted:
        allowed |= set(tokens(cue.text))
    added = sorted({t for t in tokens(text) if t in FORBIDDEN_ENTITIES and t not in allowed})
    if added:
        raise InvariantViolation(f"LMM response adds forbidden entities: {', '.join(added)}.")


def _compile_lmm(bank: CueBank, scene: SceneStructure, targets: Tuple[str, ...], client) -> EmotionPrompt:
    if client is None:
        raise ClientError("lmm_client mode needs a configured LMM client.")
    user = render_user_prompt(
        objects=[obj.name for obj in scene.objects],
        o_prompt=scene.o_prompt,
        emotion=", ".join(targets),
        scene=scene.label or "",
        attributes=[c.text for c in bank.admitted],
    )
    try:
        text = client.complete(SYSTEM_PROMPT, user)
    except ClientError:
        raise
    except Exception as e:
        raise ClientError(f"LMM client error: {e}") from e

    text = text.strip().strip('"').strip()
    if not text:
        raise InvariantViolation("LMM response is empty.")
    validate_lmm_response(text, scene, bank, targets)
    return EmotionPrompt(text, tuple(c.attribute_node for c in bank.admitted), targets)


def compile_prompt(
    bank: CueBank,
    scene: SceneStructure,
    targets: Targets,
    mode: str = "template",
    client=None,
) -> EmotionPrompt:
    """
    Compile admitted cues into an editing instruction that never names the emotion.

    Args:
        bank: filtered cue bank
        scene: scene structure the cues attach to
        targets: target emotion label(s)
        mode: "template" (deterministic) or "lmm_client"
        client: LMM transport for lmm_client mode

    Returns:
        EmotionPrompt: compiled instruction with its evidence cue ids
    """
    targets = _as_targets(targets)
    if not bank.admitted and not scene.fallback_atmosphere:
        raise EmptyEvidence("No admitted cues and no fallback atmosphere for this scene.")
    if mode == "template":
        return _compile_template(bank, scene, targets)
    if mode == "lmm_client":
        return _compile_lmm(bank, scene, targets, client)
    raise EmoKgError(f"Unknown compile mode '{mode}'.")
