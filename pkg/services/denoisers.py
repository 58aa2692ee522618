"""
Denoiser Module - Noise predictors used by the editing loop

ZeroDenoiser and GaussianDenoiser run offline; the Gaussian one is the exact
posterior-mean predictor for data drawn from N(mean(condition), std^2 I).
DenoiserClient forwards requests to a latent diffusion model over HTTP.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import requests

from services.errors import ClientError, ShapeMismatch
from services.resampling import area_resize, bilinear_resize

logger = logging.getLogger(__name__)

# Feature modulation applied to the conditional branch (attention injection)
Modulation = Callable[[Dict[int, np.ndarray]], Dict[int, np.ndarray]]


@dataclass
class DenoiserOutput:
    eps: np.ndarray
    attn: Dict[int, np.ndarray] = field(default_factory=dict)
    feat: Dict[int, np.ndarray] = field(default_factory=dict)


class Denoiser:
    """
    predict(latent, t, condition) -> DenoiserOutput.

    `condition` is the prompt text or None for the empty condition. When
    `modulate` is given it rewrites the per-layer features before the noise
    prediction is read out. `exclusive` denoisers are serialized by the pipeline.
    """

    layers: Tuple[int, ...] = (0,)
    exclusive: bool = False

    def predict(self, latent: np.ndarray, t: int, condition: Optional[str] = None,
                want_attention: bool = False, modulate: Optional[Modulation] = None) -> DenoiserOutput:
        raise NotImplementedError


def _attention_map(latent: np.ndarray) -> np.ndarray:
    energy = np.mean(latent ** 2, axis=0)
    peak = energy.max()
    return energy / peak if peak > 0 else np.zeros_like(energy)


class ZeroDenoiser(Denoiser):
    """Always predicts zero noise; DDIM steps reduce to rescalings."""

    def predict(self, latent, t, condition=None, want_attention=False, modulate=None):
        latent = np.asarray(latent, dtype=np.float64)
        attn = {0: _attention_map(latent)} if want_attention else {}
        return DenoiserOutput(np.zeros_like(latent), attn, {0: latent.copy()})


class GaussianDenoiser(Denoiser):
    """
    Closed-form noise predictor for x_0 ~ N(mu_c, std^2 I):

        eps(x_t) = g_t * (x_t - sqrt(a_t) * mu_c),  g_t = sqrt(1 - a_t) / (a_t std^2 + 1 - a_t)

    Layer 0 features are x_t - sqrt(a_t) * mu_c, so modulating them scales the
    prediction. The empty condition has mean zero; a prompt's mean is drawn
    from a generator seeded by the prompt text.
    """

    def __init__(self, schedule, std: float = 1.0, shift: float = 1.0):
        self.schedule = schedule
        self.std = std
        self.shift = shift

    def mean(self, condition: Optional[str], shape: Tuple[int, ...]) -> np.ndarray:
        if not condition:
            return np.zeros(shape)
        digest = hashlib.sha256(condition.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
        return self.shift * rng.normal(size=shape)

    def gain(self, alpha_bar: float) -> float:
        return np.sqrt(1.0 - alpha_bar) / (alpha_bar * self.std ** 2 + 1.0 - alpha_bar)

    def predict(self, latent, t, condition=None, want_attention=False, modulate=None):
        latent = np.asarray(latent, dtype=np.float64)
        alpha_bar = self.schedule.alpha_bar_at(t)
        features = {0: latent - np.sqrt(alpha_bar) * self.mean(condition, latent.shape)}
        if modulate is not None:
            features = modulate(features)
        attn = {0: _attention_map(latent)} if want_attention else {}
        return DenoiserOutput(self.gain(alpha_bar) * features[0], attn, features)


class DenoiserClient(Denoiser):
    """
    HTTP denoiser. Request {"latent", "t", "condition", "want_attention", "layers"}
    plus an optional "inject" block; response {"eps", "attn", "feat"}.
    """

    def __init__(self, endpoint: str, timeout: float = 120.0, layers: Sequence[int] = (0,),
                 exclusive: bool = True):
        self.endpoint = endpoint
        self.timeout = timeout
        self.layers = tuple(layers)
        self.exclusive = exclusive

    def predict(self, latent, t, condition=None, want_attention=False, modulate=None):
        latent = np.asarray(latent, dtype=np.float64)
        payload = {
            "latent": latent.tolist(),
            "t": int(t),
            "condition": condition,
            "want_attention": bool(want_attention),
            "layers": list(self.layers),
        }
        if modulate is not None:
            payload["inject"] = modulate.to_wire() if hasattr(modulate, "to_wire") else None
        try:
            response = requests.post(self.endpoint, json=payload, timeout=self.timeout)
            response.raise_for_status()
            data = response.json()
            eps = np.asarray(data["eps"], dtype=np.float64)
            attn = {int(k): np.asarray(v, dtype=np.float64) for k, v in data.get("attn", {}).items()}
            feat = {int(k): np.asarray(v, dtype=np.float64) for k, v in data.get("feat", {}).items()}
        except (requests.RequestException, ValueError, KeyError, TypeError) as e:
            raise ClientError(f"Denoiser request failed: {e}") from e
        if eps.shape != latent.shape:
            raise ShapeMismatch(f"Denoiser returned eps {eps.shape} for latent {latent.shape}.")
        return DenoiserOutput(eps, attn, feat)


class PixelCodec:
    """
    Maps uint8 images (H, W, 3) to latents (3, H/scale, W/scale) in [-1, 1]
    by area averaging, and back by bilinear upsampling.
    """

    def __init__(self, scale: int = 4):
        if scale < 1:
            raise ShapeMismatch(f"Codec scale must be >= 1, got {scale}.")
        self.scale = scale

    def latent_shape(self, image_shape: Tuple[int, ...]) -> Tuple[int, int]:
        return (max(1, image_shape[0] // self.scale), max(1, image_shape[1] // self.scale))

    def encode(self, image: np.ndarray) -> np.ndarray:
        pixels = np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 127.5 - 1.0
        return area_resize(pixels, self.latent_shape(pixels.shape[1:]))

    def decode(self, latent: np.ndarray, image_shape: Tuple[int, int]) -> np.ndarray:
        pixels = bilinear_resize(latent, tuple(image_shape[:2]))
        return np.clip(np.rint((pixels + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)
