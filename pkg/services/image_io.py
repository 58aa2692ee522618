"""
Image file helpers (Pillow). Images travel through the pipeline as uint8
arrays of shape (H, W, 3); masks as boolean arrays of shape (H, W).
"""

import os

import numpy as np
from PIL import Image


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_image(path: str, image: np.ndarray) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
    return path


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma as float64, the same weights Pillow uses for mode "L"."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


def save_mask_png(path: str, binary: np.ndarray) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.asarray(binary, dtype=bool).astype(np.uint8) * 255).save(path)
    return path


def load_mask_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) >= 128
