"""
Editing Service Module - Structure-preserving emotion editing
DDIM inversion, dual reconstruction/editing trajectories with classifier-free
guidance, masked latent fusion, attention injection and final harmonization.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from services.denoisers import Denoiser
from services.errors import (
    LayerOutOfRange, NonFiniteLatent, OutOfRange, ShapeMismatch, StepOutOfRange
)
from services.resampling import area_resize

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 7.5
DEFAULT_LAMBDA_ATT = 0.5
DEFAULT_HARMONIZE_STEPS = 5

TRAIN_STEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012

DENOISE = "denoise"
INVERT = "invert"


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Cumulative alpha products at the T+1 sampling points, alphas_bar[0] = 1.
    `timesteps` are the training timesteps passed to the denoiser.
    """
    alphas_bar: Tuple[float, ...]
    timesteps: Tuple[int, ...] = ()

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas_bar)
        if not alphas or alphas[0] != 1.0:
            raise OutOfRange("alphas_bar must start at 1.")
        if any(not 0.0 < a <= 1.0 for a in alphas):
            raise OutOfRange("alphas_bar values must lie in (0, 1].")
        if any(b > a for a, b in zip(alphas, alphas[1:])):
            raise OutOfRange("alphas_bar must be non-increasing.")
        timesteps = tuple(int(t) for t in self.timesteps) or tuple(range(len(alphas)))
        if len(timesteps) != len(alphas):
            raise ShapeMismatch("timesteps and alphas_bar differ in length.")
        object.__setattr__(self, "alphas_bar", alphas)
        object.__setattr__(self, "timesteps", timesteps)

    @property
    def T(self) -> int:
        return len(self.alphas_bar) - 1

    def alpha_bar_at(self, timestep: int) -> float:
        """alpha_bar for a training timestep that belongs to this schedule."""
        try:
            return self.alphas_bar[self.timesteps.index(int(timestep))]
        except ValueError:
            raise StepOutOfRange(f"Timestep {timestep} is not part of this schedule.") from None

    @classmethod
    def scaled_linear(cls, T: int = DEFAULT_STEPS, train_steps: int = TRAIN_STEPS,
                      beta_start: float = BETA_START, beta_end: float = BETA_END,
                      offset: int = 1) -> "NoiseSchedule":
        """
        Latent-diffusion training schedule sub-sampled at T evenly spaced timesteps.

        The offset shrinks so the last pick stays below train_steps. The clean
        state is labelled one training step before the first pick, which is -1
        only when every training step is sampled.
        """
        if not 0 <= T <= train_steps:
            raise StepOutOfRange(f"T must lie in [0, {train_steps}], got {T}.")
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, train_steps) ** 2
        cumulative = np.cumprod(1.0 - betas)
        stride = train_steps // T if T else train_steps
        offset = max(0, min(offset, train_steps - 1 - (T - 1) * stride)) if T else 0
        picked = [i * stride + offset for i in range(T)]
        clean = picked[0] - 1 if picked else 0
        return cls((1.0,) + tuple(float(cumulative[t]) for t in picked), (clean,) + tuple(picked))


@dataclass
class LatentTrajectory:
    """states[i] is the latent at sampling point i, for i = 0..T."""
    path_kind: str
    states: List[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]

    @property
    def xT(self) -> np.ndarray:
        return self.states[-1]

    def save(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        np.savez(path, states=np.stack(self.states), path_kind=np.asarray(self.path_kind))
        return path

    @classmethod
    def load(cls, path: str) -> "LatentTrajectory":
        with np.load(path) as data:
            return cls(str(data["path_kind"]), list(data["states"]))


@dataclass(frozen=True)
class EditConfig:
    guidance_scale: float = DEFAULT_GUIDANCE
    lambda_att: float = DEFAULT_LAMBDA_ATT
    harmonize_steps: int = DEFAULT_HARMONIZE_STEPS
    injection_layers: Optional[Tuple[int, ...]] = None
    soft_mask: bool = False

    def validate(self, schedule: NoiseSchedule) -> None:
        if self.guidance_scale < 0:
            raise OutOfRange(f"Guidance scale must be >= 0, got {self.guidance_scale}.")
        if self.lambda_att < 0:
            raise OutOfRange(f"lambda_att must be >= 0, got {self.lambda_att}.")
        if self.harmonize_steps < 0 or (schedule.T > 0 and self.harmonize_steps >= schedule.T):
            raise OutOfRange(f"harmonize_steps must lie in [0, {max(schedule.T - 1, 0)}].")

    def to_dict(self) -> Dict:
        return {
            "guidance_scale": self.guidance_scale,
            "lambda_att": self.lambda_att,
            "harmonize_steps": self.harmonize_steps,
            "injection_layers": list(self.injection_layers) if self.injection_layers is not None else None,
            "soft_mask": self.soft_mask,
        }


@dataclass
class EditResult:
    final: np.ndarray
    inversion: LatentTrajectory
    reconstruction: LatentTrajectory
    editing: LatentTrajectory

    def save_trajectories(self, directory: str) -> List[str]:
        return [
            traj.save(os.path.join(directory, f"{traj.path_kind}.npz"))
            for traj in (self.inversion, self.reconstruction, self.editing)
        ]


# --- DDIM primitives ---

def ddim_transfer(x: np.ndarray, eps: np.ndarray, alpha_from: float, alpha_to: float) -> np.ndarray:
    """Move x from noise level alpha_from to alpha_to along the predicted noise."""
    if alpha_from == alpha_to:
        return np.array(x, dtype=np.float64, copy=True)
    x0_hat = (x - np.sqrt(1.0 - alpha_from) * eps) / np.sqrt(alpha_from)
    return np.sqrt(alpha_to) * x0_hat + np.sqrt(1.0 - alpha_to) * eps


def ddim_step(x_t, eps_hat, t: int, schedule: NoiseSchedule, direction: str = DENOISE) -> np.ndarray:
    """
    One deterministic DDIM update from sampling point t to t-1 (denoise)
    or t+1 (invert).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ShapeMismatch(f"Latent {x_t.shape} and noise {eps_hat.shape} differ in shape.")
    if direction == DENOISE:
        if not 1 <= t <= schedule.T:
            raise StepOutOfRange(f"Cannot denoise from step {t} with T={schedule.T}.")
        target = t - 1
    elif direction == INVERT:
        if not 0 <= t < schedule.T:
            raise StepOutOfRange(f"Cannot invert from step {t} with T={schedule.T}.")
        target = t + 1
    else:
        raise StepOutOfRange(f"Unknown direction '{direction}'.")
    return ddim_transfer(x_t, eps_hat, schedule.alphas_bar[t], schedule.alphas_bar[target])


def _check_finite(x: np.ndarray, t: int) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteLatent(t)
    return x


def invert(x_0, denoiser: Denoiser, schedule: NoiseSchedule) -> LatentTrajectory:
    """T inversion steps under the empty condition; states[-1] is x_T."""
    x = _check_finite(np.asarray(x_0, dtype=np.float64), 0)
    states = [x]
    for i in range(schedule.T):
        eps = denoiser.predict(x, schedule.timesteps[i], None).eps
        x = _check_finite(ddim_step(x, eps, i, schedule, INVERT), i + 1)
        states.append(x)
    return LatentTrajectory("inversion", states)


def guided_eps(denoiser: Denoiser, x_t, t: int, prompt: Optional[str], w: float,
               modulate=None, unconditional: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Classifier-free guidance: eps_empty + w * (eps_prompt - eps_empty).

    `modulate` applies to the prompt branch only. An empty prompt returns the
    unconditional prediction for every w.
    """
    if w < 0:
        raise OutOfRange(f"Guidance scale must be >= 0, got {w}.")

    def empty():
        return unconditional if unconditional is not None else denoiser.predict(x_t, t, None).eps

    if not prompt or w == 0:
        return empty()
    conditional = denoiser.predict(x_t, t, prompt, modulate=modulate).eps
    if w == 1:
        return conditional
    eps_empty = empty()
    return eps_empty + w * (conditional - eps_empty)


def sample(x_T, denoiser: Denoiser, schedule: NoiseSchedule, prompt: Optional[str] = None,
           w: float = 1.0) -> LatentTrajectory:
    """Plain guided DDIM sampling from x_T down to x_0."""
    x = _check_finite(np.asarray(x_T, dtype=np.float64), schedule.T)
    states: List[Optional[np.ndarray]] = [None] * (schedule.T + 1)
    states[schedule.T] = x
    for i in range(schedule.T, 0, -1):
        eps = guided_eps(denoiser, x, schedule.timesteps[i], prompt, w)
        x = _check_finite(ddim_step(x, eps, i, schedule, DENOISE), i - 1)
        states[i - 1] = x
    return LatentTrajectory("sampling", states)


# --- Masked fusion and attention injection ---

def fuse(edit_raw, rec_raw, mask) -> np.ndarray:
    """mask * edit_raw + (1 - mask) * rec_raw, mask broadcast over channels."""
    edit_raw = np.asarray(edit_raw, dtype=np.float64)
    rec_raw = np.asarray(rec_raw, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if edit_raw.shape != rec_raw.shape:
        raise ShapeMismatch(f"Editing latent {edit_raw.shape} and reconstruction {rec_raw.shape} differ.")
    if mask.shape not in (edit_raw.shape, edit_raw.shape[-2:]):
        raise ShapeMismatch(f"Mask {mask.shape} does not broadcast to latent {edit_raw.shape}.")
    return mask * edit_raw + (1.0 - mask) * rec_raw


def inject_attention(attn_rec: Dict[int, np.ndarray], lambda_att: float, layers: Sequence[int],
                     features: Dict[int, np.ndarray]) -> Dict[int, np.ndarray]:
    """
    F <- F + lambda_att * (A_rec * F) on the given layers. Attention maps are
    area-resampled to each feature grid and broadcast over channels.
    """
    if lambda_att == 0:
        return features
    modulated = dict(features)
    for layer in layers:
        if layer not in features or layer not in attn_rec:
            raise LayerOutOfRange(f"Layer {layer} has no feature map or attention map.")
        feature = np.asarray(features[layer], dtype=np.float64)
        if feature.ndim < 2:
            raise ShapeMismatch(f"Layer {layer} features must have spatial axes, got {feature.shape}.")
        attention = area_resize(attn_rec[layer], feature.shape[-2:])
        modulated[layer] = feature + lambda_att * (attention * feature)
    return modulated


@dataclass(frozen=True)
class AttentionInjection:
    """Callable modulation carrying the reconstruction attention of one step."""
    attn_rec: Dict[int, np.ndarray]
    lambda_att: float
    layers: Tuple[int, ...]

    def __call__(self, features: Dict[int, np.ndarray]) -> Dict[int, np.ndarray]:
        return inject_attention(self.attn_rec, self.lambda_att, self.layers, features)

    def to_wire(self) -> Dict:
        return {
            "lambda_att": self.lambda_att,
            "layers": list(self.layers),
            "attn": {str(layer): np.asarray(self.attn_rec[layer]).tolist() for layer in self.layers},
        }


def mask_to_latent(mask, shape: Tuple[int, int], soft: bool = False) -> np.ndarray:
    """Area-average a pixel mask to latent resolution; re-binarize at 0.5 unless soft."""
    if hasattr(mask, "resample"):
        return mask.resample(shape, soft=soft)
    averaged = area_resize(np.asarray(mask, dtype=np.float64), shape)
    return averaged if soft else (averaged >= 0.5).astype(np.float64)


# --- Editing loop ---

PromptLike = Union[str, None, object]


def _prompt_text(prompt: PromptLike) -> Optional[str]:
    if prompt is None or isinstance(prompt, str):
        return prompt or None
    return getattr(prompt, "text", None) or None


def edit(x_0, prompt: PromptLike, mask, denoiser: Denoiser, schedule: NoiseSchedule,
         config: Optional[EditConfig] = None) -> EditResult:
    """
    Edit a latent inside a mask while reconstructing everything outside it.

    Args:
        x_0: source latent (C, h, w)
        prompt: EmotionPrompt, prompt text, or None for the empty condition
        mask: AffectiveMask or (H, W) array; resampled to the latent grid
        denoiser: noise predictor
        schedule: DDIM schedule with T steps
        config: guidance, injection and harmonization settings

    Returns:
        EditResult: final latent and the inversion, reconstruction and editing trajectories
    """
    config = config or EditConfig()
    config.validate(schedule)
    x_0 = np.asarray(x_0, dtype=np.float64)
    text = _prompt_text(prompt)
    m = mask_to_latent(mask, x_0.shape[-2:], soft=config.soft_mask)
    layers = tuple(config.injection_layers) if config.injection_layers is not None else tuple(denoiser.layers)
    w = config.guidance_scale
    T, h = schedule.T, config.harmonize_steps

    inversion = invert(x_0, denoiser, schedule)
    rec_states: List[Optional[np.ndarray]] = [None] * (T + 1)
    edit_states: List[Optional[np.ndarray]] = [None] * (T + 1)
    x_rec = x_edit = inversion.xT
    rec_states[T] = edit_states[T] = x_rec

    for i in range(T, h, -1):
        t = schedule.timesteps[i]
        rec = denoiser.predict(x_rec, t, None, want_attention=config.lambda_att > 0)
        modulate = AttentionInjection(rec.attn, config.lambda_att, layers) if config.lambda_att > 0 else None
        unconditional = rec.eps if x_edit is x_rec else None
        eps_edit = guided_eps(denoiser, x_edit, t, text, w, modulate=modulate, unconditional=unconditional)

        rec_raw = _check_finite(ddim_step(x_rec, rec.eps, i, schedule, DENOISE), i - 1)
        edit_raw = _check_finite(ddim_step(x_edit, eps_edit, i, schedule, DENOISE), i - 1)
        x_edit = _check_finite(fuse(edit_raw, rec_raw, m), i - 1)
        x_rec = rec_raw
        rec_states[i - 1], edit_states[i - 1] = x_rec, x_edit

    # merged path: no mask, no injection
    for i in range(h, 0, -1):
        t = schedule.timesteps[i]
        eps_edit = guided_eps(denoiser, x_edit, t, text, w)
        x_edit = _check_finite(ddim_step(x_edit, eps_edit, i, schedule, DENOISE), i - 1)
        rec_eps = denoiser.predict(x_rec, t, None).eps
        x_rec = _check_finite(ddim_step(x_rec, rec_eps, i, schedule, DENOISE), i - 1)
        rec_states[i - 1], edit_states[i - 1] = x_rec, x_edit

    logger.info("Edited latent %s over %d steps (%d harmonization)", x_0.shape, T, h)
    return EditResult(
        final=x_edit,
        inversion=inversion,
        reconstruction=LatentTrajectory("reconstruction", rec_states),
        editing=LatentTrajectory("editing", edit_states),
    )
