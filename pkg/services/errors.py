"""
Errors Module - Exception hierarchy shared by every service.

Routes turn these into JSON error responses, commands turn them into
click exceptions, and batch runs record them per item.
"""

from typing import Any, Optional


class EmoKgError(Exception):
    """Base class for every error raised by the editing pipeline."""


# --- Knowledge graph ---

class GraphError(EmoKgError):
    """Raised when a graph operation breaks the schema."""

    line: Optional[int] = None

    def at_line(self, line: int) -> "GraphError":
        """Annotate the error with the JSONL line it came from."""
        self.line = line
        self.args = (f"line {line}: {self.args[0] if self.args else ''}",)
        return self


class DuplicateId(GraphError):
    pass


class DimensionMismatch(GraphError):
    pass


class PrototypeOnNonAttribute(GraphError):
    pass


class UnknownEmotionLabel(GraphError):
    pass


class UnknownEndpoint(GraphError):
    pass


class IllegalRelation(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


class WeightOutOfRange(GraphError):
    pass


class ParseError(GraphError):
    pass


class UnknownNode(GraphError):
    pass


class GraphFrozen(GraphError):
    pass


# --- Retrieval and cues ---

class WrongNodeKind(EmoKgError):
    pass


class ZeroEmbedding(EmoKgError):
    pass


class EmptySubgraph(EmoKgError):
    pass


class EmptyEvidence(EmoKgError):
    pass


class ClientError(EmoKgError):
    pass


class InvariantViolation(EmoKgError):
    pass


# --- Numerics shared by region localization and editing ---

class ShapeMismatch(EmoKgError):
    pass


class LayerOutOfRange(EmoKgError):
    pass


class NonFiniteLoss(EmoKgError):
    pass


class StepOutOfRange(EmoKgError):
    pass


class NonFiniteLatent(EmoKgError):
    def __init__(self, t: int):
        super().__init__(f"Non-finite latent produced at timestep {t}.")
        self.t = t


# --- Metrics ---

class OutOfRange(EmoKgError):
    pass


class AllZeroSimilarity(EmoKgError):
    pass


class UnknownLabel(EmoKgError):
    pass


class EmptySet(EmoKgError):
    pass


class ManifestError(EmoKgError):
    pass


class ProviderError(EmoKgError):
    pass


# --- Pipeline ---

class ConfigError(EmoKgError):
    pass


class StageError(EmoKgError):
    """A pipeline stage failed; carries the stage name and the partial record."""

    def __init__(self, stage: str, cause: Exception, record: Any = None):
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.record = record
