"""
Providers Module - Embedding, classification and scoring backends

Offline stand-ins (HashEmbeddingProvider, ZeroShotClassifier) keep evaluation
deterministic without model weights; the *Client classes call external
services and surface transport failures as ProviderError.
"""

import hashlib
import logging
from typing import Dict, Optional, Sequence, Union

import numpy as np
import requests

from services.errors import ProviderError
from services.image_io import load_image
from services.kg_service import DEFAULT_DIM, MIKELS_EMOTIONS
from services.resampling import area_resize

logger = logging.getLogger(__name__)

ImageLike = Union[str, np.ndarray]
THUMBNAIL = (16, 16)


def _seeded_rng(*parts: str) -> np.random.Generator:
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


class HashEmbeddingProvider:
    """
    Deterministic embeddings. Text maps to a vector drawn from a generator
    seeded by the text; images map to a fixed random projection of a 16x16
    thumbnail, so similar pictures get similar vectors.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        size = THUMBNAIL[0] * THUMBNAIL[1] * 3
        self._projection = np.random.default_rng(seed).normal(size=(size, dim)) / np.sqrt(size)

    def embed_text(self, text: str) -> np.ndarray:
        return _seeded_rng(str(self.seed), text.strip().lower()).normal(size=self.dim)

    def embed_image(self, image: ImageLike) -> np.ndarray:
        pixels = load_image(image) if isinstance(image, str) else np.asarray(image)
        thumb = area_resize(pixels.astype(np.float64).transpose(2, 0, 1), THUMBNAIL)
        return (thumb.ravel() / 127.5 - 1.0) @ self._projection


class EmbeddingClient:
    """POST {"image_path"} or {"text"} -> {"embedding": [...]}."""

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def _embed(self, payload: Dict) -> np.ndarray:
        try:
            response = requests.post(self.endpoint, json=payload, timeout=self.timeout)
            response.raise_for_status()
            return np.asarray(response.json()["embedding"], dtype=np.float64)
        except (requests.RequestException, ValueError, KeyError, TypeError) as e:
            raise ProviderError(f"Embedding request failed: {e}") from e

    def embed_text(self, text: str) -> np.ndarray:
        return self._embed({"text": text})

    def embed_image(self, image: ImageLike) -> np.ndarray:
        if not isinstance(image, str):
            raise ProviderError("EmbeddingClient needs an image path.")
        return self._embed({"image_path": image})


class ZeroShotClassifier:
    """Predicts the label whose text embedding is most cosine-similar to the image."""

    def __init__(self, provider, labels: Sequence[str] = MIKELS_EMOTIONS):
        self.provider = provider
        self.labels = tuple(labels)
        self._text = None

    def scores(self, image: ImageLike) -> Dict[str, float]:
        if self._text is None:
            self._text = [np.asarray(self.provider.embed_text(label)) for label in self.labels]
        z = np.asarray(self.provider.embed_image(image))
        z_norm = np.linalg.norm(z)
        if z_norm == 0:
            raise ProviderError("Image embedding has zero norm.")
        return {
            label: float(z @ e / (z_norm * np.linalg.norm(e)))
            for label, e in zip(self.labels, self._text)
        }

    def classify(self, image: ImageLike) -> str:
        scores = self.scores(image)
        return max(self.labels, key=lambda label: scores[label])


class ClassifierClient:
    """POST {"image_path"} -> {"label", "scores"}."""

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def classify(self, image: ImageLike) -> str:
        if not isinstance(image, str):
            raise ProviderError("ClassifierClient needs an image path.")
        try:
            response = requests.post(self.endpoint, json={"image_path": image}, timeout=self.timeout)
            response.raise_for_status()
            return str(response.json()["label"])
        except (requests.RequestException, ValueError, KeyError, TypeError) as e:
            raise ProviderError(f"Classifier request failed: {e}") from e


class ScoreProvider:
    """POST {"image_path"} -> {"aes_score": f, "semantic_c": f} for the optional report columns."""

    COLUMNS = ("aes_score", "semantic_c")

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def score(self, image_path: str) -> Dict[str, float]:
        try:
            response = requests.post(self.endpoint, json={"image_path": image_path}, timeout=self.timeout)
            response.raise_for_status()
            data = response.json()
            return {column: float(data[column]) for column in self.COLUMNS if column in data}
        except (requests.RequestException, ValueError, KeyError, TypeError) as e:
            raise ProviderError(f"Score request failed: {e}") from e


class IntensityClient:
    """POST {"cue", "emotion"} -> {"confidence": f}; used in place of LEADS_TO weights."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def intensity(self, cue_text: str, emotion: str) -> float:
        try:
            response = requests.post(
                self.endpoint, json={"cue": cue_text, "emotion": emotion}, timeout=self.timeout
            )
            response.raise_for_status()
            return float(response.json()["confidence"])
        except (requests.RequestException, ValueError, KeyError, TypeError) as e:
            raise ProviderError(f"Intensity request failed: {e}") from e


def make_embedding_provider(endpoint: Optional[str], dim: int = DEFAULT_DIM, seed: int = 0):
    return EmbeddingClient(endpoint) if endpoint else HashEmbeddingProvider(dim=dim, seed=seed)


def make_classifier(endpoint: Optional[str], provider, labels: Sequence[str] = MIKELS_EMOTIONS):
    return ClassifierClient(endpoint) if endpoint else ZeroShotClassifier(provider, labels)
