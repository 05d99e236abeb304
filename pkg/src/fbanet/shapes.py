"""Synthetic labeled images: parametric shapes on cluttered backgrounds.

Each category is one shape family drawn at random position, size, rotation
and colour over a noisy plain background. Pixels are quantized to 8 bits so
a pool written to disk and read back is bit-identical to the in-memory one.
"""

from __future__ import annotations

import numpy as np

from .imagesets import ImageRecord

SHAPES = ("disk", "ring", "square", "cross", "triangle", "stripes", "checker", "diamond")


def _mask(kind: str, u: np.ndarray, v: np.ndarray, rng) -> np.ndarray:
    """Shape indicator on coordinates ``u, v`` normalized to the shape's half-size."""
    r = np.hypot(u, v)
    if kind == "disk":
        return r <= 1.0
    if kind == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if kind == "square":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if kind == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))
    if kind == "triangle":
        return (v <= 0.8) & (v >= -1.0 + 2 * np.abs(u) * 0.9)
    if kind == "stripes":
        inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
        return inside & (np.floor((v + 1.0) * 2.5) % 2 == 0)
    if kind == "checker":
        inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
        return inside & ((np.floor((u + 1) * 2) + np.floor((v + 1) * 2)) % 2 == 0)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    raise ValueError(f"unknown shape {kind!r}")


def draw_shape(kind: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One ``[3, size, size]`` image in [0, 1] containing a single ``kind`` shape."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    # background: one random tone plus pixel noise
    tone = rng.uniform(0.0, 1.0, 3)
    bg = np.broadcast_to(0.5 * tone[:, None, None] + 0.25, (3, size, size))
    img = bg + rng.normal(0, 0.06, (3, size, size))
    half = rng.uniform(0.18, 0.42) * size
    cy, cx = rng.uniform(half * 0.9, size - half * 0.9, 2)
    theta = rng.uniform(-0.35, 0.35)
    dy, dx = (yy - cy) / half, (xx - cx) / half
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _mask(kind, u, v, rng)
    color = rng.uniform(0.0, 1.0, 3)
    # keep the shape visible against the background
    if np.abs(color - bg[:, 0, 0]).sum() < 0.6:
        color = 1.0 - color
    img[:, mask] = color[:, None] + rng.normal(0, 0.03, (3, int(mask.sum())))
    return np.round(np.clip(img, 0, 1) * 255) / 255


def synthetic_pool(categories=SHAPES[:6], per_category: int = 100, seed: int = 0, size: int = 32) -> list[ImageRecord]:
    """Deterministic labeled pool; image ``i`` of category ``c`` depends only on ``(seed, c, i)``."""
    pool = []
    for ci, cat in enumerate(categories):
        for i in range(per_category):
            rng = np.random.default_rng([seed, ci, i])
            pix = draw_shape(cat, rng, size).astype(np.float32)
            pool.append(ImageRecord(f"{cat}-{i:05d}", pix, cat))
    return pool
