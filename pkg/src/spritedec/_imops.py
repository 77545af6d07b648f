"""Small numpy image utilities shared by tracking, initialization, datagen."""

from __future__ import annotations

import numpy as np


def bilinear_sample(img: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample `img` (H, W) or (H, W, C) at float pixel coords, edge-clamped.

    Coordinates follow the pixel-center convention: (0, 0) is the center of
    the top-left pixel.
    """
    h, w = img.shape[:2]
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[..., None] if img.ndim == 3 else px - x0
    fy = (py - y0)[..., None] if img.ndim == 3 else py - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W[, C]) to (out_h, out_w[, C]) with bilinear sampling."""
    h, w = img.shape[:2]
    py = (2.0 * np.arange(out_h) + 1.0) * h / (2.0 * out_h) - 0.5
    px = (2.0 * np.arange(out_w) + 1.0) * w / (2.0 * out_w) - 0.5
    gx, gy = np.meshgrid(px, py)
    return bilinear_sample(img, gx, gy)


def box_blur3(img: np.ndarray) -> np.ndarray:
    """One 3x3 box-filter pass with zero padding, (H, W) input."""
    padded = np.pad(img, 1, mode="constant")
    out = np.zeros_like(img, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / 9.0
