"""PNG image IO with the standard sRGB transfer function."""

from __future__ import annotations

import numpy as np
from PIL import Image

_SRGB_LINEAR_CUT = 0.0031308
_SRGB_ENCODED_CUT = 0.04045


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= _SRGB_LINEAR_CUT, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= _SRGB_ENCODED_CUT, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(path, image: np.ndarray) -> None:
    """Write a linear float [0,1] HxWx3 image as 8-bit sRGB PNG."""
    u8 = np.round(linear_to_srgb(np.asarray(image, dtype=np.float64)) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def save_png_gray(path, image: np.ndarray) -> None:
    """Write a float [0,1] HxW map as 8-bit grayscale PNG (no transfer curve)."""
    u8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def load_png(path) -> np.ndarray:
    """Read an 8-bit sRGB PNG into a linear float [0,1] HxWx3 array."""
    img = Image.open(path).convert("RGB")
    u8 = np.asarray(img, dtype=np.float64) / 255.0
    return srgb_to_linear(u8)
