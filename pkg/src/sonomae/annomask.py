"""Overlay detection and removal.

Annotations (text, colored ink, grayscale marks) are detected as three
binary masks, fused and refined morphologically, then removed by an
isophote-transport + Laplacian-smoothing inpaint that reconstructs the
background inside the masked region.
"""

from __future__ import annotations

import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import imgproc
from .imgproc import BadThresholdOrder, ensure_gray, ensure_rgb, promote_rgb
from .rng import Rng


class AnnotationError(ValueError):
    pass


class BadThreshold(AnnotationError):
    pass


class DetectorUnavailable(AnnotationError):
    pass


class DimensionMismatch(AnnotationError):
    pass


class AllMasked(AnnotationError):
    pass


class PipelineStageError(RuntimeError):
    """Wraps a failure with the cleaning stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class TextDetection:
    bbox: tuple[int, int, int, int]  # (x, y, w, h) in pixels
    confidence: float
    text: str = ""


@dataclass
class MaskBundle:
    """All intermediate masks from one cleaning pass, for audit."""

    text_mask: np.ndarray
    color_mask: np.ndarray
    gray_mask: np.ndarray
    fused: np.ndarray


@dataclass(frozen=True)
class InpaintConfig:
    iterations: int = 300
    dt: float = 0.1  # explicit Euler stability for the 4-neighbor Laplacian: dt <= 0.25
    anisotropy_weight: float = 0.25
    dilation_radius: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.dt <= 0 or self.dt > 0.25:
            raise ValueError("need iterations >= 1 and 0 < dt <= 0.25")
        if self.anisotropy_weight < 0 or self.dilation_radius < 0:
            raise ValueError("anisotropy_weight and dilation_radius must be >= 0")


@dataclass(frozen=True)
class CleanConfig:
    """All knobs of the cleaning pipeline. The paper-facing defaults are
    deliberately conservative; sensitivity tests exercise the ranges."""

    text_min_confidence: float = 0.5
    text_detector_cmd: tuple[str, ...] | None = None  # external engine, optional
    tophat_size: int = 15
    glyph_min_height: int = 2
    glyph_max_height: int = 32
    clahe_before_text: bool = True
    clahe_clip: float = 2.0
    clahe_grid: tuple[int, int] = (8, 8)
    saturation_floor: float = 0.35
    kmeans_k: int = 3
    seed: int = 0
    canny_low: float = 0.06
    canny_high: float = 0.14
    area_ceiling: float = 0.02  # fraction of image area; larger contours are anatomy
    close_radius: int = 1
    open_radius: int = 1
    dilation_radius: int = 1
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)


# ---------------------------------------------------------------------------
# text


def fallback_text_detector(
    gray: np.ndarray,
    tophat_size: int = 15,
    contrast: float = 0.2,
    glyph_min_height: int = 2,
    glyph_max_height: int = 32,
    merge_gap: int = 3,
) -> list[TextDetection]:
    """Built-in heuristic so the pipeline runs with no external engine.

    Bright small components of the binarized white top-hat are glyph
    candidates; neighbors within merge_gap columns are fused into rows.
    Confidence reflects the mean top-hat response of the component.
    """
    gray = ensure_gray(gray)
    se = np.ones((tophat_size, tophat_size), dtype=bool)
    tophat = gray - ndimage.grey_opening(gray, footprint=se, mode="reflect")
    hot = tophat > contrast
    if not hot.any():
        return []
    # connect glyphs of one text run before labeling, then tight-bound the
    # original hot pixels so merging does not inflate the boxes
    merged = ndimage.binary_dilation(hot, structure=np.ones((1, 2 * merge_gap + 1), dtype=bool))
    labels, n = ndimage.label(merged, structure=np.ones((3, 3), dtype=int))
    dets = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        member = hot[sl] & (labels[sl] == i)
        rows, cols = np.nonzero(member)
        if rows.size == 0:
            continue
        y0 = sl[0].start + int(rows.min())
        y1 = sl[0].start + int(rows.max()) + 1
        x0 = sl[1].start + int(cols.min())
        x1 = sl[1].start + int(cols.max()) + 1
        h, w = y1 - y0, x1 - x0
        if not glyph_min_height <= h <= glyph_max_height or w < 2:
            continue
        vals = tophat[y0:y1, x0:x1]
        conf = float(np.clip(2.0 * vals[vals > contrast].mean(), 0.0, 1.0))
        dets.append(TextDetection(bbox=(x0, y0, w, h), confidence=conf))
    return dets


class SubprocessTextDetector:
    """External engine contract: `cmd <png-path>` prints one detection per
    line as TSV `x y w h confidence text`."""

    def __init__(self, cmd: tuple[str, ...]):
        if not cmd or shutil.which(cmd[0]) is None:
            raise DetectorUnavailable(f"external text detector not found: {cmd!r}")
        self.cmd = tuple(cmd)

    def __call__(self, gray: np.ndarray) -> list[TextDetection]:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "frame.png"
            imgproc.write_png(path, gray)
            proc = subprocess.run(
                [*self.cmd, str(path)], capture_output=True, text=True, check=False
            )
            if proc.returncode != 0:
                raise DetectorUnavailable(f"text detector exited {proc.returncode}: {proc.stderr.strip()}")
        dets = []
        for line in proc.stdout.splitlines():
            if not line.strip():
                continue
            x, y, w, h, conf, *text = line.split("\t")
            dets.append(
                TextDetection(
                    bbox=(int(x), int(y), int(w), int(h)),
                    confidence=float(conf),
                    text=text[0] if text else "",
                )
            )
        return dets


def detect_text_regions(
    gray: np.ndarray,
    detector: Callable[[np.ndarray], list[TextDetection]] | None = None,
    min_confidence: float = 0.5,
) -> list[TextDetection]:
    """Run a text detector (built-in fallback when None) and keep
    detections at or above min_confidence, with bboxes clipped to bounds."""
    gray = ensure_gray(gray)
    if not 0.0 <= min_confidence <= 1.0:
        raise BadThreshold(f"min_confidence must be in [0, 1], got {min_confidence}")
    if detector is None:
        detector = fallback_text_detector
    ih, iw = gray.shape
    out = []
    for d in detector(gray):
        x, y, w, h = d.bbox
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, iw), min(y + h, ih)
        if x1 <= x0 or y1 <= y0 or d.confidence < min_confidence:
            continue
        out.append(replace(d, bbox=(x0, y0, x1 - x0, y1 - y0)))
    return out


def detections_to_mask(dets: list[TextDetection], shape: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for d in dets:
        x, y, w, h = d.bbox
        mask[y : y + h, x : x + w] = True
    return mask


# ---------------------------------------------------------------------------
# color


def _kmeans(features: np.ndarray, k: int, rng: Rng, tol: float = 1e-6, max_iter: int = 100):
    """Plain seeded Lloyd iterations; returns (assignments, centroids)."""
    n = features.shape[0]
    k = min(k, n)
    centroids = features[rng.permutation(n)[:k]].copy()
    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new = centroids.copy()
        for j in range(k):
            member = assign == j
            if member.any():
                new[j] = features[member].mean(axis=0)
            else:  # re-seed empty cluster at the farthest point
                new[j] = features[d2.min(axis=1).argmax()]
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift < tol:
            break
    return assign, centroids


def color_annotation_mask(
    img: np.ndarray, saturation_floor: float = 0.35, k: int = 3, seed: int = 0
) -> np.ndarray:
    """Mark saturated ink/highlighter pixels.

    Pixels with HSV saturation >= saturation_floor are clustered by
    (sin 2*pi*H, cos 2*pi*H, S, V) -- the trig pair keeps hue circular --
    and clusters whose mean saturation clears the floor are flagged.
    Grayscale tissue (low S) is never marked.
    """
    img = ensure_rgb(img)
    if k < 2:
        raise ValueError("k must be >= 2")
    hsv = imgproc.rgb_to_hsv(img)
    cand = hsv[..., 1] >= saturation_floor
    mask = np.zeros(img.shape[:2], dtype=bool)
    if not cand.any():
        return mask
    h = hsv[..., 0][cand]
    s = hsv[..., 1][cand]
    v = hsv[..., 2][cand]
    features = np.stack([np.sin(2 * np.pi * h), np.cos(2 * np.pi * h), s, v], axis=1)
    assign, _ = _kmeans(features, k, Rng(seed))
    marked = np.zeros(len(s), dtype=bool)
    for j in range(assign.max() + 1):
        member = assign == j
        if member.any() and s[member].mean() >= saturation_floor:
            marked |= member
    mask[cand] = marked
    return mask


# ---------------------------------------------------------------------------
# grayscale marks


def grayscale_annotation_mask(
    gray: np.ndarray, low: float, high: float, area_ceiling: float = 0.02
) -> np.ndarray:
    """Pencil marks and underlines: Canny edges, contour extraction, then
    fill closed contours smaller than area_ceiling * image area."""
    gray = ensure_gray(gray)
    if low > high:
        raise BadThresholdOrder(f"low {low} > high {high}")
    edges = imgproc.canny(gray, low, high)
    out = np.zeros(gray.shape, dtype=bool)
    if not edges.any():
        return out
    ceiling = area_ceiling * gray.size
    for contour in imgproc.extract_contours(edges):
        if contour.area < ceiling:
            out |= contour.filled
    return out


# ---------------------------------------------------------------------------
# fusion and inpainting


def fuse_and_refine(
    text_mask: np.ndarray,
    color_mask: np.ndarray,
    gray_mask: np.ndarray,
    close_radius: int = 1,
    open_radius: int = 1,
    dilation_radius: int = 1,
) -> np.ndarray:
    """Union of the three masks, opened (speckle removal) then closed
    (gap bridging) then dilated so inpainting covers annotation fringes.
    A radius of 0 skips that morphology step."""
    shapes = {text_mask.shape, color_mask.shape, gray_mask.shape}
    if len(shapes) != 1:
        raise DimensionMismatch(f"mask shapes differ: {sorted(shapes)}")
    fused = text_mask | color_mask | gray_mask
    if open_radius > 0:
        fused = imgproc.morph(fused, "open", open_radius)
    if close_radius > 0:
        fused = imgproc.morph(fused, "close", close_radius)
    if dilation_radius > 0:
        fused = imgproc.morph(fused, "dilate", dilation_radius)
    return fused


def _laplacian(u: np.ndarray) -> np.ndarray:
    p = np.pad(u, 1, mode="reflect")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * u


def _inpaint_channel(channel: np.ndarray, mask: np.ndarray, cfg: InpaintConfig) -> np.ndarray:
    # nearest-unmasked-neighbor fill as the initial condition
    _, (iy, ix) = ndimage.distance_transform_edt(mask, return_indices=True)
    u = channel[iy, ix].astype(np.float64)
    w = cfg.anisotropy_weight
    for _ in range(cfg.iterations):
        lap = _laplacian(u)
        update = lap
        if w > 0:
            gy, gx = np.gradient(u)
            gly, glx = np.gradient(lap)
            # transport smoothness along isophotes: grad(lap) . perp(grad u)
            transport = (gly * gx - glx * gy) / (np.hypot(gx, gy) + 1e-8)
            update = lap + w * transport
        u[mask] += cfg.dt * update[mask]
    return np.clip(u, 0.0, 1.0)


def inpaint_ns(img: np.ndarray, mask: np.ndarray, cfg: InpaintConfig = InpaintConfig()) -> np.ndarray:
    """Fill masked pixels by a transport-diffusion iteration; pixels
    outside the mask come back bit-identical."""
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise DimensionMismatch(f"mask {mask.shape} vs image {img.shape[:2]}")
    if cfg.dilation_radius > 0:
        mask = imgproc.morph(mask, "dilate", cfg.dilation_radius)
    if not mask.any():
        return img.copy()
    if mask.all():
        raise AllMasked("no unmasked boundary to inpaint from")
    out = img.copy()
    if img.ndim == 2:
        out[mask] = _inpaint_channel(img, mask, cfg)[mask]
    else:
        for c in range(img.shape[2]):
            out[..., c][mask] = _inpaint_channel(img[..., c], mask, cfg)[mask]
    return out


# ---------------------------------------------------------------------------
# orchestration


def clean_image(img: np.ndarray, cfg: CleanConfig = CleanConfig()) -> tuple[np.ndarray, MaskBundle]:
    """Full cleaning pass: detect text / color / grayscale annotations,
    fuse, and inpaint. Grayscale inputs are promoted to 3 channels.
    Returns the cleaned image plus every intermediate mask."""

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:  # noqa: BLE001 - deliberate stage tagging
            raise PipelineStageError(name, exc) from exc

    rgb = stage("promote", promote_rgb, img)
    lum = stage("luminance", imgproc.luminance_lab, rgb)
    if cfg.clahe_before_text:
        text_input = stage("clahe", imgproc.clahe, lum, cfg.clahe_clip, cfg.clahe_grid)
    else:
        text_input = lum
    if cfg.text_detector_cmd is not None:
        detector = SubprocessTextDetector(cfg.text_detector_cmd)
    else:
        def detector(g):
            return fallback_text_detector(
                g,
                tophat_size=cfg.tophat_size,
                glyph_min_height=cfg.glyph_min_height,
                glyph_max_height=cfg.glyph_max_height,
            )

    dets = stage("text", detect_text_regions, text_input, detector, cfg.text_min_confidence)
    text_mask = detections_to_mask(dets, lum.shape)
    color_mask = stage(
        "color", color_annotation_mask, rgb, cfg.saturation_floor, cfg.kmeans_k, cfg.seed
    )
    gray_mask = stage(
        "grayscale", grayscale_annotation_mask, lum, cfg.canny_low, cfg.canny_high, cfg.area_ceiling
    )
    fused = stage(
        "fuse",
        fuse_and_refine,
        text_mask,
        color_mask,
        gray_mask,
        cfg.close_radius,
        cfg.open_radius,
        cfg.dilation_radius,
    )
    bundle = MaskBundle(text_mask=text_mask, color_mask=color_mask, gray_mask=gray_mask, fused=fused)
    if fused.any():
        cleaned = stage("inpaint", inpaint_ns, rgb, fused, cfg.inpaint)
    else:
        cleaned = rgb.astype(np.float64).copy()
    return cleaned, bundle
