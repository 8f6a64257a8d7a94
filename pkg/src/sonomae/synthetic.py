"""Synthetic image generators used by tests, scripts and demos.

These produce ultrasound-looking grayscale scans (smooth echogenic blobs
modulated by speckle), annotated variants with known ground-truth overlay
masks (the oracle for the cleaning pipeline), smooth low-frequency images
for optimization smoke tests, and a linearly separable two-class set for
fine-tuning sanity checks.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .imgproc import hsv_to_rgb, promote_rgb
from .rng import Rng


def ultrasound_like(size: int, rng: Rng, speckle: float = 0.12) -> np.ndarray:
    """Grayscale scan stand-in: a dark field with a few soft blobs, times
    a smoothed multiplicative speckle term. Gradients stay well below
    annotation edges so the default Canny floor ignores the texture."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    img = np.full((size, size), 0.16)
    for _ in range(4):
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, 2)
        sy, sx = rng.uniform(0.08 * size, 0.25 * size, 2)
        img += rng.uniform(0.08, 0.35) * np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 1.2)
    return np.clip(img * (1.0 + speckle * noise), 0.0, 1.0)


def _paint_disk(mask: np.ndarray, cy: float, cx: float, radius: float) -> None:
    y0 = max(int(cy - radius) - 1, 0)
    y1 = min(int(cy + radius) + 2, mask.shape[0])
    x0 = max(int(cx - radius) - 1, 0)
    x1 = min(int(cx + radius) + 2, mask.shape[1])
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask[y0:y1, x0:x1] |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def stroke_mask(size: int, p0, p1, thickness: float) -> np.ndarray:
    """Rasterize a thick line segment as a boolean mask."""
    mask = np.zeros((size, size), dtype=bool)
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    steps = int(np.hypot(*(p1 - p0)) * 2) + 2
    for t in np.linspace(0.0, 1.0, steps):
        cy, cx = p0 + t * (p1 - p0)
        _paint_disk(mask, cy, cx, thickness / 2.0)
    return mask


def stamp_stroke(rgb: np.ndarray, rng: Rng, thickness: float = 5.0) -> np.ndarray:
    """Draw one fully saturated ink stroke; returns its exact pixel mask."""
    size = rgb.shape[0]
    margin = 0.15 * size
    p0 = rng.uniform(margin, size - margin, 2)
    p1 = rng.uniform(margin, size - margin, 2)
    if np.hypot(*(p1 - p0)) < 0.25 * size:  # keep strokes visibly long
        p1 = p0 + (p1 - p0 + 1e-3) / (np.hypot(*(p1 - p0)) + 1e-3) * 0.3 * size
        p1 = np.clip(p1, 2, size - 3)
    mask = stroke_mask(size, p0, p1, thickness)
    hue = float(rng.uniform(0.0, 1.0))
    color = hsv_to_rgb(np.array([[[hue, 1.0, 0.9]]]))[0, 0]
    rgb[mask] = color
    return mask


def stamp_glyph_row(rgb: np.ndarray, rng: Rng, glyph_h: int = 7) -> np.ndarray:
    """Stamp a row of bright blocky glyphs; returns the snug bbox mask of
    the row (the annotation region a text detector should report)."""
    size = rgb.shape[0]
    y0 = int(rng.uniform(0.1 * size, 0.85 * size - glyph_h))
    x = int(rng.uniform(0.08 * size, 0.35 * size))
    x_start, x_end = x, x
    n_glyphs = int(rng.integers(4, 8))
    value = float(rng.uniform(0.85, 0.98))
    for _ in range(n_glyphs):
        gw = int(rng.integers(3, 6))
        if x + gw >= 0.92 * size:
            break
        rgb[y0 : y0 + glyph_h, x : x + gw] = value
        x_end = x + gw
        x += gw + int(rng.integers(2, 4))
    bbox = np.zeros(rgb.shape[:2], dtype=bool)
    bbox[y0 : y0 + glyph_h, x_start:x_end] = True
    return bbox


def annotated_scan(size: int, rng: Rng, n_strokes: int = 1, with_text: bool = True):
    """Ultrasound-like scan with injected overlays.

    Returns (rgb image, ground-truth overlay mask): exact pixels for ink
    strokes, snug bounding boxes for glyph rows.
    """
    base = ultrasound_like(size, rng)
    rgb = promote_rgb(base).copy()
    gt = np.zeros((size, size), dtype=bool)
    for _ in range(n_strokes):
        gt |= stamp_stroke(rgb, rng)
    if with_text:
        gt |= stamp_glyph_row(rgb, rng)
    return rgb, gt


def smooth_images(n: int, size: int, rng: Rng, blob_amp: float = 0.2) -> list[np.ndarray]:
    """Grayscale images with a per-image base level plus one soft blob at a
    random location: spatially structured yet reconstructable from short
    training runs, which is what optimization smoke tests need."""
    out = []
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    for i in range(n):
        img = np.full((size, size), 0.15 + 0.7 * i / max(n - 1, 1))
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
        sy, sx = rng.uniform(0.15 * size, 0.3 * size, 2)
        img += blob_amp * rng.uniform(-1, 1) * np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        out.append(np.clip(img, 0.0, 1.0))
    return out


def separable_set(n: int, size: int, rng: Rng):
    """Two-class set that is linearly separable from pooled intensity:
    class 0 is dark (mean ~0.25), class 1 bright (mean ~0.75), plus mild
    texture. Returns (images, labels)."""
    images, labels = [], []
    for i in range(n):
        label = i % 2
        base = 0.25 if label == 0 else 0.75
        img = np.full((size, size), base)
        img += 0.05 * ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 2.0)
        images.append(np.clip(img, 0.0, 1.0))
        labels.append(label)
    return images, np.array(labels, dtype=np.int64)
