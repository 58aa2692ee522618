"""
Resampling helpers shared by region localization and editing.

Both resamplers are expressed as matrices so that a 2-D map resizes as
R_h @ X @ R_w.T, which keeps the decoder gradient in closed form.
skimage.transform.resize would hide the linear map the backward pass needs
(its transpose), so these numpy matrices are used instead.
"""

from functools import lru_cache
from typing import Tuple

import numpy as np

from services.errors import ShapeMismatch


@lru_cache(maxsize=64)
def area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row i averages the input cells overlapping [i*n_in/n_out, (i+1)*n_in/n_out)."""
    if n_out < 1 or n_in < 1:
        raise ShapeMismatch(f"Cannot resample {n_in} cells to {n_out}.")
    matrix = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        start, stop = i * scale, (i + 1) * scale
        for j in range(int(np.floor(start)), min(int(np.ceil(stop)), n_in)):
            overlap = min(stop, j + 1) - max(start, j)
            if overlap > 0:
                matrix[i, j] = overlap / scale
    matrix.setflags(write=False)
    return matrix


@lru_cache(maxsize=64)
def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation; the identity when n_out == n_in."""
    if n_out < 1 or n_in < 1:
        raise ShapeMismatch(f"Cannot resample {n_in} cells to {n_out}.")
    matrix = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    matrix.setflags(write=False)
    return matrix


def _apply(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # (..., H, W) -> (..., h, w)
    return np.einsum("ih,...hw,jw->...ij", rows, x, cols)


def area_resize(x, shape: Tuple[int, int]) -> np.ndarray:
    """Area-average the last two axes of x to `shape`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeMismatch(f"Expected at least 2 dimensions, got shape {x.shape}.")
    h, w = x.shape[-2:]
    if (h, w) == tuple(shape):
        return x.copy()
    return _apply(x, area_matrix(shape[0], h), area_matrix(shape[1], w))


def bilinear_resize(x, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinearly upsample (or downsample) the last two axes of x to `shape`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeMismatch(f"Expected at least 2 dimensions, got shape {x.shape}.")
    h, w = x.shape[-2:]
    if (h, w) == tuple(shape):
        return x.copy()
    return _apply(x, bilinear_matrix(shape[0], h), bilinear_matrix(shape[1], w))
