"""
Region Service Module - Emotion region localization
Aggregates CLS-to-patch attention, focuses patch features, decodes a dense
emotion map and reduces it to the largest connected region.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from database import read_json, write_json
from services.errors import (
    EmptySet, LayerOutOfRange, NonFiniteLoss, OutOfRange, ShapeMismatch
)
from services.image_io import load_mask_png, save_mask_png
from services.resampling import area_resize, bilinear_matrix

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DEFAULT_HIDDEN = 16
DEFAULT_INIT_SCALE = 0.1
ATTENTION_SLACK = 1e-9


@dataclass(eq=False)
class BackboneOutput:
    """Patch features (CLS excluded) and per-layer CLS-to-patch attention."""
    patch_features: np.ndarray
    cls_attentions: Dict[int, np.ndarray]
    grid: Tuple[int, int]

    def __post_init__(self):
        self.patch_features = np.asarray(self.patch_features, dtype=np.float64)
        self.cls_attentions = {int(k): np.asarray(v, dtype=np.float64) for k, v in self.cls_attentions.items()}
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        n = self.grid[0] * self.grid[1]
        if self.patch_features.ndim != 2 or self.patch_features.shape[0] != n:
            raise ShapeMismatch(f"Patch features {self.patch_features.shape} do not match grid {self.grid}.")
        for layer, attention in self.cls_attentions.items():
            if attention.shape != (n,):
                raise ShapeMismatch(f"Layer {layer} attention has shape {attention.shape}; expected ({n},).")
            if np.any(attention < 0) or attention.sum() > 1.0 + ATTENTION_SLACK:
                raise OutOfRange(f"Layer {layer} attention must be nonnegative and sum to at most 1.")

    @property
    def n_patches(self) -> int:
        return self.patch_features.shape[0]

    @property
    def dim(self) -> int:
        return self.patch_features.shape[1]

    @classmethod
    def from_dict(cls, data: Dict) -> "BackboneOutput":
        return cls(
            patch_features=data["patch_features"],
            cls_attentions={int(k): v for k, v in data["cls_attentions"].items()},
            grid=tuple(data["grid"]),
        )


@dataclass(frozen=True)
class LayerSet:
    indices: Tuple[int, ...]

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        if not indices:
            raise LayerOutOfRange("Layer set must not be empty.")
        if len(set(indices)) != len(indices):
            raise LayerOutOfRange(f"Layer set {indices} repeats a layer.")
        object.__setattr__(self, "indices", indices)

    @classmethod
    def last(cls, count: int, num_layers: int) -> "LayerSet":
        """The last `count` layers of a backbone with `num_layers` layers."""
        if not 1 <= count <= num_layers:
            raise LayerOutOfRange(f"Cannot take the last {count} of {num_layers} layers.")
        return cls(tuple(range(num_layers - count, num_layers)))

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(eq=False)
class AffectiveMask:
    """Dense map in [0, 1], its post-processed binary mask and box (x0, y0, x1, y1), ends exclusive."""
    dense: np.ndarray
    binary: np.ndarray
    box: Optional[Tuple[int, int, int, int]] = None
    threshold: float = DEFAULT_THRESHOLD

    @property
    def shape(self) -> Tuple[int, int]:
        return self.binary.shape

    @property
    def is_empty(self) -> bool:
        return not bool(self.binary.any())

    @classmethod
    def from_binary(cls, binary, threshold: float = DEFAULT_THRESHOLD) -> "AffectiveMask":
        binary = np.asarray(binary, dtype=bool)
        return cls(binary.astype(np.float64), binary, bounding_box(binary), threshold)

    def resample(self, shape: Tuple[int, int], soft: bool = False) -> np.ndarray:
        """Area-average to `shape`; re-binarized at 0.5 unless soft."""
        averaged = area_resize(self.binary.astype(np.float64), shape)
        if soft:
            return averaged
        return (averaged >= 0.5).astype(np.float64)

    def save(self, path: str) -> str:
        """Write the binary mask as an 8-bit PNG and the box to a JSON sidecar."""
        save_mask_png(path, self.binary)
        write_json(sidecar_path(path), {
            "box": list(self.box) if self.box else None,
            "shape": list(self.shape),
            "threshold": self.threshold,
        })
        return path

    @classmethod
    def load(cls, path: str) -> "AffectiveMask":
        binary = load_mask_png(path)
        threshold = DEFAULT_THRESHOLD
        if os.path.exists(sidecar_path(path)):
            threshold = read_json(sidecar_path(path)).get("threshold", DEFAULT_THRESHOLD)
        return cls.from_binary(binary, threshold)


def sidecar_path(mask_path: str) -> str:
    return os.path.splitext(mask_path)[0] + ".json"


@dataclass(eq=False)
class DecoderParams:
    """
    Two pointwise linear layers from D features to one logit per patch,
    followed by a bilinear upsample to out_shape and a logistic unit.
    """
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    out_shape: Tuple[int, int]

    NAMES = ("w1", "b1", "w2", "b2")

    @classmethod
    def initialize(cls, dim: int, out_shape: Tuple[int, int], hidden: int = DEFAULT_HIDDEN,
                   seed: int = 0, scale: float = DEFAULT_INIT_SCALE) -> "DecoderParams":
        rng = np.random.default_rng(seed)
        return cls(
            w1=rng.normal(scale=scale, size=(dim, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(scale=scale, size=(hidden, 1)),
            b2=np.zeros(1),
            out_shape=tuple(out_shape),
        )

    @classmethod
    def zeros(cls, dim: int, out_shape: Tuple[int, int], hidden: int = DEFAULT_HIDDEN) -> "DecoderParams":
        return cls(np.zeros((dim, hidden)), np.zeros(hidden), np.zeros((hidden, 1)), np.zeros(1), tuple(out_shape))

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> "DecoderParams":
        updated = {name: value - lr * grads[name] for name, value in self.arrays().items()}
        return DecoderParams(out_shape=self.out_shape, **updated)

    def copy(self) -> "DecoderParams":
        return DecoderParams(out_shape=self.out_shape, **{k: v.copy() for k, v in self.arrays().items()})

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        np.savez(path, out_shape=np.asarray(self.out_shape), **self.arrays())
        return path

    @classmethod
    def load(cls, path: str) -> "DecoderParams":
        with np.load(path) as data:
            return cls(
                w1=data["w1"], b1=data["b1"], w2=data["w2"], b2=data["b2"],
                out_shape=tuple(int(v) for v in data["out_shape"]),
            )


# --- Inference ---

def aggregate_attention(out: BackboneOutput, layers: LayerSet) -> np.ndarray:
    """Mean of the selected layers' CLS-to-patch attention vectors."""
    missing = [layer for layer in layers.indices if layer not in out.cls_attentions]
    if missing:
        raise LayerOutOfRange(f"Backbone output has no attention for layers {missing}.")
    return np.mean(np.stack([out.cls_attentions[layer] for layer in layers.indices]), axis=0)


def focus_features(out: BackboneOutput, m_patch) -> np.ndarray:
    """Reweight patch features by the patch map; returns a (H_p, W_p, D) grid."""
    m_patch = np.asarray(m_patch, dtype=np.float64)
    if m_patch.shape != (out.n_patches,):
        raise ShapeMismatch(f"Patch map has shape {m_patch.shape}; expected ({out.n_patches},).")
    focused = out.patch_features * m_patch[:, None]
    return focused.reshape(out.grid[0], out.grid[1], out.dim)


def _forward(focused: np.ndarray, params: DecoderParams, out_shape: Optional[Tuple[int, int]] = None):
    out_shape = tuple(out_shape or params.out_shape)
    hidden = focused @ params.w1 + params.b1
    logits = (hidden @ params.w2)[..., 0] + params.b2[0]
    rows = bilinear_matrix(out_shape[0], focused.shape[0])
    cols = bilinear_matrix(out_shape[1], focused.shape[1])
    upsampled = rows @ logits @ cols.T
    return hidden, rows, cols, 1.0 / (1.0 + np.exp(-upsampled))


def _check_grid(focused: np.ndarray, params: DecoderParams):
    if focused.ndim != 3 or focused.shape[2] != params.dim:
        raise ShapeMismatch(f"Focused grid {focused.shape} does not match decoder input dimension {params.dim}.")


def predict_map(focused, params: DecoderParams, out_shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Dense emotion map in [0, 1], of shape out_shape (default: params.out_shape)."""
    focused = np.asarray(focused, dtype=np.float64)
    _check_grid(focused, params)
    return _forward(focused, params, out_shape)[3]


def bounding_box(binary: np.ndarray) -> Optional[Tuple[int, int, int, int]]:
    if not binary.any():
        return None
    rows = np.flatnonzero(binary.any(axis=1))
    cols = np.flatnonzero(binary.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def postprocess(dense, threshold: float = DEFAULT_THRESHOLD) -> AffectiveMask:
    """
    Binarize at threshold and keep the largest 4-connected component.
    Equal-size components are resolved in favour of the one whose first
    pixel comes first in row-major order.
    """
    if not 0.0 < threshold < 1.0:
        raise OutOfRange(f"Threshold must lie in (0, 1), got {threshold}.")
    dense = np.asarray(dense, dtype=np.float64)
    labels, count = ndimage.label(dense >= threshold)
    if count == 0:
        return AffectiveMask(dense, np.zeros(dense.shape, dtype=bool), None, threshold)
    sizes = np.bincount(labels.ravel())[1:]
    binary = labels == int(np.argmax(sizes)) + 1
    return AffectiveMask(dense, binary, bounding_box(binary), threshold)


def localize(image, backbone, params: DecoderParams, layers: LayerSet,
             threshold: float = DEFAULT_THRESHOLD, out_shape: Optional[Tuple[int, int]] = None) -> AffectiveMask:
    """
    Run backbone, attention aggregation, focusing, decoding and post-processing.
    The map is decoded at out_shape, defaulting to the image size for arrays.
    """
    if out_shape is None and isinstance(image, np.ndarray):
        out_shape = image.shape[:2]
    out = backbone.forward(image, layers.indices)
    focused = focus_features(out, aggregate_attention(out, layers))
    mask = postprocess(predict_map(focused, params, out_shape), threshold)
    logger.info("Localized region: box=%s, %d pixels", mask.box, int(mask.binary.sum()))
    return mask


# --- Training ---

Sample = Tuple[np.ndarray, np.ndarray]


def decoder_loss_and_grad(params: DecoderParams, samples: Sequence[Sample]) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean squared error between predicted and target maps, averaged over
    samples, and its gradient with respect to every decoder array.

    Args:
        params: decoder parameters
        samples: (focused grid, target map) pairs

    Returns:
        tuple: (loss, gradient dict keyed like DecoderParams.arrays())
    """
    if not samples:
        raise EmptySet("Training set is empty.")
    grads = {name: np.zeros_like(value) for name, value in params.arrays().items()}
    total = 0.0
    for focused, target in samples:
        _check_grid(focused, params)
        if target.shape != params.out_shape:
            raise ShapeMismatch(f"Target map {target.shape} does not match decoder output {params.out_shape}.")
        hidden, rows, cols, pred = _forward(focused, params)
        diff = pred - target
        total += float(np.mean(diff ** 2))

        d_upsampled = (2.0 / diff.size) * diff * pred * (1.0 - pred)
        d_logits = rows.T @ d_upsampled @ cols
        grads["w2"] += np.einsum("ij,ijh->h", d_logits, hidden)[:, None]
        grads["b2"] += d_logits.sum()
        d_hidden = d_logits[..., None] * params.w2[:, 0]
        grads["w1"] += np.einsum("ijd,ijh->dh", focused, d_hidden)
        grads["b1"] += d_hidden.sum(axis=(0, 1))

    n = len(samples)
    return total / n, {name: g / n for name, g in grads.items()}


def train_decoder(
    dataset: Sequence[Tuple[BackboneOutput, np.ndarray]],
    layers: LayerSet,
    steps: int,
    lr: float,
    hidden: int = DEFAULT_HIDDEN,
    seed: int = 0,
    init: Optional[DecoderParams] = None,
) -> Tuple[DecoderParams, List[float]]:
    """
    Full-batch gradient descent on the decoder.

    Args:
        dataset: (backbone output, pseudo ground-truth mask) pairs
        layers: layer set used for attention aggregation
        steps: number of descent steps
        lr: learning rate
        hidden: hidden width when no init is given
        seed: seed for the random initialization
        init: starting parameters (defaults to a seeded random init)

    Returns:
        tuple: (trained params, loss trace of length steps + 1)
    """
    if not dataset:
        raise EmptySet("Training set is empty.")
    samples = []
    for out, target in dataset:
        focused = focus_features(out, aggregate_attention(out, layers))
        samples.append((focused, np.asarray(target, dtype=np.float64)))
    out_shape = samples[0][1].shape
    if any(target.shape != out_shape for _, target in samples):
        raise ShapeMismatch("Target masks in the training set differ in shape.")

    params = init.copy() if init is not None else DecoderParams.initialize(
        samples[0][0].shape[2], out_shape, hidden=hidden, seed=seed
    )
    loss, grads = decoder_loss_and_grad(params, samples)
    trace = [loss]
    for step in range(steps):
        params = params.step(grads, lr)
        loss, grads = decoder_loss_and_grad(params, samples)
        if not np.isfinite(loss) or not params.is_finite():
            raise NonFiniteLoss(f"Loss became non-finite at step {step + 1}.")
        trace.append(loss)
    logger.info("Trained decoder for %d steps: loss %.6f -> %.6f", steps, trace[0], trace[-1])
    return params, trace


def synthetic_blob_dataset(
    n: int,
    grid: Tuple[int, int] = (4, 4),
    blob: Tuple[int, int] = (2, 2),
    dim: int = 2,
    upscale: int = 1,
    seed: int = 0,
) -> List[Tuple[BackboneOutput, np.ndarray]]:
    """
    Pseudo ground truth for desk-scale training: one rectangular blob per
    sample, visible to a linear decoder through the first feature channel.

    Attention is uniform, so focused features are the raw features / N.
    Channel 0 is +1 inside the blob and -1 outside after focusing; channel 1
    is a constant 1; any further channels are zero.
    """
    if dim < 2:
        raise ShapeMismatch("Synthetic samples need at least two feature channels.")
    rng = np.random.default_rng(seed)
    hp, wp = grid
    count = hp * wp
    samples = []
    for _ in range(n):
        top = int(rng.integers(0, hp - blob[0] + 1))
        left = int(rng.integers(0, wp - blob[1] + 1))
        inside = np.zeros(grid)
        inside[top:top + blob[0], left:left + blob[1]] = 1.0

        features = np.zeros((count, dim))
        features[:, 0] = count * (2.0 * inside.ravel() - 1.0)
        features[:, 1] = count
        attention = np.full(count, 1.0 / count)
        out = BackboneOutput(features, {0: attention}, grid)
        samples.append((out, np.kron(inside, np.ones((upscale, upscale)))))
    return samples
