"""
Backbone Module - Vision transformer feature and attention providers

TinyBackbone is a small deterministic ViT in numpy used offline and in tests.
BackboneClient talks to a real backbone served over HTTP.
"""

import logging
from typing import Dict, Optional, Sequence, Union

import numpy as np
import requests

from services.errors import ClientError, LayerOutOfRange, ShapeMismatch
from services.image_io import load_image
from services.region_service import BackboneOutput

logger = logging.getLogger(__name__)

ImageLike = Union[str, np.ndarray]


def _layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


class TinyBackbone:
    """
    Pre-norm ViT: patch embedding, CLS token, `depth` self-attention blocks.

    Attention reported per layer is the CLS row averaged over heads with the
    CLS self-weight removed, so each vector sums to at most 1.
    """

    def __init__(self, patch: int = 8, dim: int = 32, depth: int = 4, heads: int = 4, seed: int = 0):
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} is not divisible by {heads} heads.")
        self.patch = patch
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.seed = seed
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        self.w_embed = rng.normal(scale=1.0 / np.sqrt(patch * patch * 3), size=(patch * patch * 3, dim))
        self.cls_token = rng.normal(scale=0.02, size=dim)
        self.blocks = [
            {
                "qkv": rng.normal(scale=scale, size=(dim, 3 * dim)),
                "proj": rng.normal(scale=scale, size=(dim, dim)),
                "fc1": rng.normal(scale=scale, size=(dim, 2 * dim)),
                "fc2": rng.normal(scale=1.0 / np.sqrt(2 * dim), size=(2 * dim, dim)),
            }
            for _ in range(depth)
        ]

    @property
    def num_layers(self) -> int:
        return self.depth

    def _positions(self, hp: int, wp: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, hp, wp])
        return rng.normal(scale=0.02, size=(hp * wp, self.dim))

    def _patches(self, image: np.ndarray):
        hp, wp = image.shape[0] // self.patch, image.shape[1] // self.patch
        if hp == 0 or wp == 0:
            raise ShapeMismatch(f"Image {image.shape[:2]} is smaller than one {self.patch}px patch.")
        cropped = image[:hp * self.patch, :wp * self.patch].astype(np.float64) / 255.0
        tiles = cropped.reshape(hp, self.patch, wp, self.patch, 3).transpose(0, 2, 1, 3, 4)
        return tiles.reshape(hp * wp, -1), (hp, wp)

    def _attend(self, x: np.ndarray, block: Dict[str, np.ndarray]):
        n, head_dim = x.shape[0], self.dim // self.heads
        q, k, v = np.split(_layer_norm(x) @ block["qkv"], 3, axis=-1)
        q = q.reshape(n, self.heads, head_dim).transpose(1, 0, 2)
        k = k.reshape(n, self.heads, head_dim).transpose(1, 0, 2)
        v = v.reshape(n, self.heads, head_dim).transpose(1, 0, 2)
        attn = _softmax(q @ k.transpose(0, 2, 1) / np.sqrt(head_dim))
        mixed = (attn @ v).transpose(1, 0, 2).reshape(n, self.dim)
        return mixed @ block["proj"], attn

    def forward(self, image: ImageLike, layers: Optional[Sequence[int]] = None) -> BackboneOutput:
        """
        Args:
            image: uint8 (H, W, 3) array or image path
            layers: layers whose CLS attention is reported (default: all)

        Returns:
            BackboneOutput: final patch tokens and the requested attention vectors
        """
        layers = list(range(self.depth)) if layers is None else [int(layer) for layer in layers]
        bad = [layer for layer in layers if not 0 <= layer < self.depth]
        if bad:
            raise LayerOutOfRange(f"Layers {bad} are outside 0..{self.depth - 1}.")
        if isinstance(image, str):
            image = load_image(image)

        patches, grid = self._patches(np.asarray(image))
        x = np.vstack([self.cls_token, patches @ self.w_embed + self._positions(*grid)])
        attentions = {}
        for index, block in enumerate(self.blocks):
            mixed, attn = self._attend(x, block)
            x = x + mixed
            x = x + _gelu(_layer_norm(x) @ block["fc1"]) @ block["fc2"]
            if index in layers:
                attentions[index] = attn.mean(axis=0)[0, 1:]
        return BackboneOutput(x[1:], attentions, grid)


class BackboneClient:
    """
    HTTP backbone. Request {"image_path", "layers"}; response
    {"patch_features", "cls_attentions": {"<layer>": [...]}, "grid"}.
    """

    def __init__(self, endpoint: str, timeout: float = 60.0, num_layers: int = 12):
        self.endpoint = endpoint
        self.timeout = timeout
        self.num_layers = num_layers

    def forward(self, image: ImageLike, layers: Optional[Sequence[int]] = None) -> BackboneOutput:
        if not isinstance(image, str):
            raise ClientError("BackboneClient needs an image path, not pixel data.")
        layers = list(range(self.num_layers)) if layers is None else [int(layer) for layer in layers]
        try:
            response = requests.post(
                self.endpoint, json={"image_path": image, "layers": layers}, timeout=self.timeout
            )
            response.raise_for_status()
            return BackboneOutput.from_dict(response.json())
        except (requests.RequestException, ValueError, KeyError, TypeError) as e:
            raise ClientError(f"Backbone request failed: {e}") from e
