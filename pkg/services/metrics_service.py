"""
Metrics Service Module - Evaluation metrics and comparison reports
CLIP-I proximity, target emotion activation (TEA), SSIM and emotion accuracy,
aggregated per editing method.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from skimage.metrics import structural_similarity
from tqdm import tqdm

from services.errors import (
    AllZeroSimilarity, EmoKgError, EmptySet, ManifestError, OutOfRange,
    ProviderError, ShapeMismatch, UnknownLabel
)
from services.image_io import load_image, to_grayscale
from services.kg_service import MIKELS_EMOTIONS, POSITIVE_EMOTIONS
from services.retrieval_service import cosine_similarity

logger = logging.getLogger(__name__)

PROX_CENTER = 0.75
PROX_HALF_WIDTH = 0.25
ZERO_SUM = 1e-12

SSIM_WINDOW = 11
SSIM_MIN_GAUSSIAN_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DATA_RANGE = 255.0

MANIFEST_COLUMNS = ("source_path", "edited_path", "target_emotion", "method")
ABLATION_COLUMN = "ablation"
METRIC_COLUMNS = ("clip_i_raw", "clip_i_prox", "tea", "ssim")


def default_polarity() -> Dict[str, str]:
    return {label: ("positive" if label in POSITIVE_EMOTIONS else "negative") for label in MIKELS_EMOTIONS}


# --- Pointwise metrics ---

def clip_i_prox(d: float) -> float:
    """Proximity of the raw CLIP-I similarity to 0.75, linear falloff to 0 at +-0.25."""
    if not 0.0 <= d <= 1.0:
        raise OutOfRange(f"CLIP-I similarity must lie in [0, 1], got {d}.")
    return max(0.0, 1.0 - abs(d - PROX_CENTER) / PROX_HALF_WIDTH)


def tea_distribution(similarities: Sequence[float]) -> np.ndarray:
    """Negative similarities clamped to zero, then normalized to sum to one."""
    clamped = np.maximum(np.asarray(similarities, dtype=np.float64), 0.0)
    total = clamped.sum()
    if total < ZERO_SUM:
        raise AllZeroSimilarity("Every emotion similarity is zero after clamping.")
    return clamped / total


def tea_from_similarities(similarities: Sequence[float], target_index: int) -> float:
    """TEA from precomputed similarities; target_index is 1-based."""
    if not 1 <= target_index <= len(similarities):
        raise OutOfRange(f"Target index {target_index} is outside 1..{len(similarities)}.")
    return float(tea_distribution(similarities)[target_index - 1])


def tea(image_embedding, emotion_text_embeddings: Sequence, target_index: int,
        num_emotions: int = len(MIKELS_EMOTIONS)) -> float:
    """
    Target emotion activation.

    Args:
        image_embedding: edited image embedding
        emotion_text_embeddings: one text embedding per emotion, in label order
        target_index: 1-based position of the target emotion
        num_emotions: size of the label set the embeddings must cover

    Returns:
        float: the target's share of the clamped, normalized similarities
    """
    if len(emotion_text_embeddings) != num_emotions:
        raise ShapeMismatch(
            f"Expected {num_emotions} emotion embeddings, got {len(emotion_text_embeddings)}."
        )
    sims = [cosine_similarity(image_embedding, e) for e in emotion_text_embeddings]
    return tea_from_similarities(sims, target_index)


def ssim(img_a, img_b) -> float:
    """
    SSIM on luma with an 11x11 Gaussian window (sigma 1.5), data range 255.
    Smaller images use the largest odd window that fits, uniform below 7x7.
    """
    a = to_grayscale(img_a)
    b = to_grayscale(img_b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"Images differ in size: {a.shape} vs {b.shape}.")
    smallest = min(a.shape)
    if smallest < 1:
        raise ShapeMismatch(f"Cannot compare empty images of shape {a.shape}.")
    win_size = min(SSIM_WINDOW, smallest if smallest % 2 else smallest - 1)
    return float(structural_similarity(
        a, b,
        win_size=win_size,
        gaussian_weights=win_size >= SSIM_MIN_GAUSSIAN_WINDOW,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
        data_range=SSIM_DATA_RANGE,
    ))


def emo_acc(predictions: Sequence[str], targets: Sequence[str], mode: str = "acc8",
            polarity: Optional[Dict[str, str]] = None) -> float:
    """Exact-match rate (acc8) or polarity-match rate (acc2)."""
    if len(predictions) != len(targets):
        raise ShapeMismatch(f"{len(predictions)} predictions for {len(targets)} targets.")
    if not predictions:
        raise EmptySet("No predictions to score.")
    polarity = polarity or default_polarity()
    for label in list(predictions) + list(targets):
        if label not in polarity:
            raise UnknownLabel(f"Unknown emotion label '{label}'.")
    if mode == "acc8":
        hits = sum(p == t for p, t in zip(predictions, targets))
    elif mode == "acc2":
        hits = sum(polarity[p] == polarity[t] for p, t in zip(predictions, targets))
    else:
        raise EmoKgError(f"Unknown accuracy mode '{mode}'.")
    return hits / len(predictions)


# --- Reports ---

@dataclass
class MetricReport:
    items: List[Dict] = field(default_factory=list)
    aggregates: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def counts(self) -> Dict[str, int]:
        return {method: int(row["count"]) for method, row in self.aggregates.items()}

    def items_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.items)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame.from_dict(self.aggregates, orient="index").rename_axis("method")

    def to_markdown(self) -> str:
        return self.table().to_markdown(floatfmt=".4f")

    def write(self, out_dir: str) -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "items": os.path.join(out_dir, "items.csv"),
            "table": os.path.join(out_dir, "report.md"),
        }
        self.items_frame().to_csv(paths["items"], index=False)
        with open(paths["table"], "w", encoding="utf-8") as f:
            f.write(self.to_markdown() + "\n")
        return paths


def read_manifest(path: str) -> pd.DataFrame:
    """Manifest CSV with source_path, edited_path, target_emotion, method."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise ManifestError(f"Manifest not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ManifestError(f"Unreadable manifest {path}: {e}") from None
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f"Manifest is missing columns: {', '.join(missing)}.")
    if frame.empty:
        raise ManifestError("Manifest has no rows.")
    base = os.path.dirname(os.path.abspath(path))
    for column in ("source_path", "edited_path"):
        frame[column] = [p if os.path.isabs(p) else os.path.join(base, p) for p in frame[column]]
    return frame


def _call_provider(fn, *args):
    try:
        return fn(*args)
    except EmoKgError:
        raise
    except Exception as e:
        raise ProviderError(f"Provider call failed: {e}") from e


def _group(row: Dict) -> str:
    """Aggregation key: the method, qualified by its ablation variant when the manifest has one."""
    ablation = row.get(ABLATION_COLUMN) or ""
    return f"{row['method']}/{ablation}" if ablation else row["method"]


def _score_item(row: Dict, provider, classifier, text_embeddings, labels, score_provider) -> Dict:
    if row["target_emotion"] not in labels:
        raise UnknownLabel(f"Unknown target emotion '{row['target_emotion']}'.")
    for column in ("source_path", "edited_path"):
        if not os.path.exists(row[column]):
            raise ManifestError(f"Missing image: {row[column]}")

    z_src = _call_provider(provider.embed_image, row["source_path"])
    z_edit = _call_provider(provider.embed_image, row["edited_path"])
    d = min(max(cosine_similarity(z_src, z_edit), 0.0), 1.0)
    item = {
        "source_path": row["source_path"],
        "edited_path": row["edited_path"],
        "method": row["method"],
        "group": _group(row),
        "target": row["target_emotion"],
        "predicted": _call_provider(classifier.classify, row["edited_path"]),
        "clip_i_raw": d,
        "clip_i_prox": clip_i_prox(d),
        "tea": tea(z_edit, text_embeddings, labels.index(row["target_emotion"]) + 1, len(labels)),
        "ssim": ssim(load_image(row["source_path"]), load_image(row["edited_path"])),
    }
    if score_provider is not None:
        item.update(_call_provider(score_provider.score, row["edited_path"]))
    return item


def aggregate(items: Sequence[Dict], polarity: Optional[Dict[str, str]] = None) -> Dict[str, float]:
    """Means of the per-item metrics plus both accuracies."""
    frame = pd.DataFrame(list(items))
    row = {column: float(frame[column].mean()) for column in METRIC_COLUMNS}
    for column in sorted(set(frame.columns) - set(METRIC_COLUMNS)):
        if column.startswith(("aes_", "semantic_")):
            row[column] = float(frame[column].mean())
    predicted, target = list(frame["predicted"]), list(frame["target"])
    row["emo_acc8"] = emo_acc(predicted, target, "acc8", polarity)
    row["emo_acc2"] = emo_acc(predicted, target, "acc2", polarity)
    row["count"] = len(frame)
    return row


def report(
    manifest_path: str,
    provider,
    classifier,
    out_dir: Optional[str] = None,
    score_provider=None,
    labels: Sequence[str] = MIKELS_EMOTIONS,
    polarity: Optional[Dict[str, str]] = None,
    workers: int = 1,
    progress: bool = False,
) -> MetricReport:
    """
    Score every manifest row and aggregate per method.

    Args:
        manifest_path: CSV manifest; relative paths resolve against its directory
        provider: embedding provider (embed_image, embed_text)
        classifier: emotion classifier (classify)
        out_dir: when given, items.csv and report.md are written there
        score_provider: optional provider of aesthetic/semantic scores
        labels: emotion labels in TEA order
        workers: per-item thread pool size

    Returns:
        MetricReport: per-item rows and per-method aggregates
    """
    frame = read_manifest(manifest_path)
    labels = list(labels)
    text_embeddings = [_call_provider(provider.embed_text, label) for label in labels]
    rows = frame.to_dict("records")

    def score(row):
        return _score_item(row, provider, classifier, text_embeddings, labels, score_provider)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        items = list(tqdm(pool.map(score, rows), total=len(rows), desc="Scoring", disable=not progress))

    aggregates = {}
    for group in sorted({item["group"] for item in items}):
        aggregates[group] = aggregate([i for i in items if i["group"] == group], polarity)
    result = MetricReport(items, aggregates)
    if out_dir:
        result.write(out_dir)
    logger.info("Scored %d items across %d methods", len(items), len(aggregates))
    return result
