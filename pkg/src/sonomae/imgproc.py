"""Pixel-level primitives for the cleaning pipeline.

Images are numpy arrays of real intensities in [0, 1]: (H, W) for
grayscale, (H, W, 3) for color. Binary masks are (H, W) bool arrays.
Quantization to 8 bits happens only at the PNG boundary, so PDE
inpainting and normalization stay numerically clean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage


class ImageError(ValueError):
    pass


class WrongChannelCount(ImageError):
    pass


class BadThresholdOrder(ImageError):
    pass


class DegenerateImage(ImageError):
    pass


@dataclass(frozen=True)
class NormalizationSpec:
    """Channel-wise mean/std applied before the model sees pixels."""

    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be > 0")


def ensure_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise WrongChannelCount(f"expected single-channel (H, W), got shape {img.shape}")
    return img


def ensure_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise WrongChannelCount(f"expected 3-channel (H, W, 3), got shape {img.shape}")
    return img


def promote_rgb(img: np.ndarray) -> np.ndarray:
    """Replicate a grayscale image into 3 channels; pass RGB through."""
    img = np.asarray(img)
    if img.ndim == 2:
        return np.repeat(img[:, :, None], 3, axis=2)
    return ensure_rgb(img)


# ---------------------------------------------------------------------------
# color spaces


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Hexcone HSV, all channels scaled to [0, 1]. S = 0 where V = 0 and
    H = 0 for achromatic pixels."""
    img = ensure_rgb(img)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    v = img.max(axis=-1)
    c = v - img.min(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(v > 0, c / np.maximum(v, 1e-12), 0.0)
        h = np.zeros_like(v)
        cs = np.maximum(c, 1e-12)
        h = np.where(v == r, ((g - b) / cs) % 6.0, h)
        h = np.where(v == g, (b - r) / cs + 2.0, h)
        h = np.where(v == b, (r - g) / cs + 4.0, h)
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    """Inverse hexcone conversion (round-trip helper for tests and
    synthetic overlay construction)."""
    img = ensure_rgb(img)
    h, s, v = img[..., 0], img[..., 1], img[..., 2]
    hp = (h % 1.0) * 6.0
    c = v * s
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    zeros = np.zeros_like(h)
    sector = np.floor(hp).astype(int) % 6
    r = np.choose(sector, [c, x, zeros, zeros, x, c])
    g = np.choose(sector, [x, c, c, x, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, x, c, c, x])
    m = v - c
    return np.stack([r + m, g + m, b + m], axis=-1)


def luminance_lab(img: np.ndarray) -> np.ndarray:
    """CIELAB L* of an sRGB image (D65), scaled from [0, 100] to [0, 1]."""
    img = ensure_rgb(img)
    linear = np.where(img <= 0.04045, img / 12.92, ((img + 0.055) / 1.055) ** 2.4)
    y = linear @ np.array([0.2126, 0.7152, 0.0722])
    delta = 6.0 / 29.0
    f = np.where(y > delta**3, np.cbrt(y), y / (3.0 * delta**2) + 4.0 / 29.0)
    return (116.0 * f - 16.0) / 100.0


# ---------------------------------------------------------------------------
# contrast and edges


def clahe(
    img: np.ndarray,
    clip_limit: float = 2.0,
    tile_grid: tuple[int, int] = (8, 8),
    nbins: int = 256,
) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Per tile, the histogram is clipped at clip_limit * (tile_pixels / nbins)
    with the excess redistributed uniformly; each pixel is remapped through
    the bilinear blend of the four surrounding tile CDFs.
    """
    img = ensure_gray(img)
    rows, cols = tile_grid
    if rows < 1 or cols < 1 or clip_limit <= 0:
        raise ValueError("tile dims must be >= 1 and clip_limit > 0")
    h, w = img.shape
    if h < rows or w < cols:
        raise DegenerateImage(f"image {h}x{w} smaller than tile grid {rows}x{cols}")

    bins = np.clip((img * nbins).astype(int), 0, nbins - 1)
    # tile edges; tiles may differ by one pixel when dims do not divide evenly
    ye = np.linspace(0, h, rows + 1).astype(int)
    xe = np.linspace(0, w, cols + 1).astype(int)
    cdfs = np.empty((rows, cols, nbins))
    for ty in range(rows):
        for tx in range(cols):
            tile = bins[ye[ty] : ye[ty + 1], xe[tx] : xe[tx + 1]]
            hist = np.bincount(tile.ravel(), minlength=nbins).astype(float)
            clip = clip_limit * tile.size / nbins
            excess = np.maximum(hist - clip, 0.0).sum()
            hist = np.minimum(hist, clip) + excess / nbins
            cdfs[ty, tx] = np.cumsum(hist) / tile.size

    # bilinear interpolation between tile mappings, clamped at the border
    centers_y = (ye[:-1] + ye[1:]) / 2.0
    centers_x = (xe[:-1] + xe[1:]) / 2.0
    yy = np.arange(h)[:, None].repeat(w, axis=1).astype(float)
    xx = np.arange(w)[None, :].repeat(h, axis=0).astype(float)
    ty = np.clip(np.searchsorted(centers_y, yy[:, 0], side="right") - 1, 0, rows - 2 if rows > 1 else 0)
    tx = np.clip(np.searchsorted(centers_x, xx[0, :], side="right") - 1, 0, cols - 2 if cols > 1 else 0)
    ty = ty[:, None].repeat(w, axis=1)
    tx = tx[None, :].repeat(h, axis=0)
    if rows > 1:
        fy = np.clip((yy - centers_y[ty]) / np.maximum(centers_y[ty + 1] - centers_y[ty], 1e-12), 0.0, 1.0)
        ty1 = ty + 1
    else:
        fy = np.zeros_like(yy)
        ty1 = ty
    if cols > 1:
        fx = np.clip((xx - centers_x[tx]) / np.maximum(centers_x[tx + 1] - centers_x[tx], 1e-12), 0.0, 1.0)
        tx1 = tx + 1
    else:
        fx = np.zeros_like(xx)
        tx1 = tx

    m00 = cdfs[ty, tx, bins]
    m01 = cdfs[ty, tx1, bins]
    m10 = cdfs[ty1, tx, bins]
    m11 = cdfs[ty1, tx1, bins]
    out = (1 - fy) * ((1 - fx) * m00 + fx * m01) + fy * ((1 - fx) * m10 + fx * m11)
    return np.clip(out, 0.0, 1.0)


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
_SOBEL_Y = _SOBEL_X.T


def canny(img: np.ndarray, low: float, high: float, sigma: float = 1.4) -> np.ndarray:
    """Canny edge mask. Thresholds are fractions of the maximum attainable
    Sobel magnitude on unit-range images (4 * sqrt(2)), an absolute scale:
    a constant image yields an empty mask and weak texture stays below a
    fixed floor regardless of what else is in the frame."""
    img = ensure_gray(img).astype(float)
    if not 0.0 <= low <= high <= 1.0:
        raise BadThresholdOrder(f"need 0 <= low <= high <= 1, got low={low}, high={high}")
    smooth = ndimage.gaussian_filter(img, sigma, mode="reflect")
    gx = ndimage.convolve(smooth, _SOBEL_X, mode="reflect")
    gy = ndimage.convolve(smooth, _SOBEL_Y, mode="reflect")
    mag = np.hypot(gx, gy) / (4.0 * np.sqrt(2.0))
    if mag.max() <= 1e-12:
        return np.zeros(img.shape, dtype=bool)

    # non-maximum suppression in 4 quantized gradient directions
    angle = np.arctan2(gy, gx)
    sector = (np.round(angle / (np.pi / 4.0)).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros(img.shape, dtype=bool)
    for s, (dy, dx) in offsets.items():
        fwd = padded[1 + dy : 1 + dy + img.shape[0], 1 + dx : 1 + dx + img.shape[1]]
        back = padded[1 - dy : 1 - dy + img.shape[0], 1 - dx : 1 - dx + img.shape[1]]
        keep |= (sector == s) & (mag >= fwd) & (mag >= back)

    weak = keep & (mag >= low)
    strong = keep & (mag >= high)
    if not strong.any():
        return np.zeros(img.shape, dtype=bool)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    good = np.unique(labels[strong])
    return np.isin(labels, good[good > 0])


# ---------------------------------------------------------------------------
# contours and morphology


@dataclass
class Contour:
    """Closed 8-connected boundary trace of one connected component."""

    points: np.ndarray  # (K, 2) int array of (row, col), trace order
    filled: np.ndarray = field(repr=False)  # (H, W) bool, the filled component
    area: int = 0


_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _trace_boundary(comp: np.ndarray) -> np.ndarray:
    """Moore-neighbor trace of the outer boundary of a filled component."""
    ys, xs = np.nonzero(comp)
    start = (int(ys[0]), int(xs[0]))  # topmost-leftmost in scan order
    h, w = comp.shape

    def inside(p):
        return 0 <= p[0] < h and 0 <= p[1] < w and comp[p]

    chain = [start]
    # enter from the left of the start pixel
    prev_dir = 6  # pointing West
    cur = start
    while True:
        found = False
        for k in range(8):
            d = (prev_dir + 1 + k) % 8  # clockwise sweep from the backtrack
            nxt = (cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1])
            if inside(nxt):
                chain.append(nxt)
                prev_dir = (d + 4) % 8  # direction we came from
                cur = nxt
                found = True
                break
        if not found:  # isolated pixel
            break
        if cur == start and len(chain) > 1:
            chain.pop()
            break
    return np.array(chain, dtype=int)


def extract_contours(mask: np.ndarray) -> list[Contour]:
    """One closed boundary chain per 8-connected component; `filled` holds
    the component with interior holes closed so chain and area agree."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return []
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    out = []
    for i in range(1, n + 1):
        comp = ndimage.binary_fill_holes(labels == i)
        pts = _trace_boundary(comp)
        out.append(Contour(points=pts, filled=comp, area=int(comp.sum())))
    return out


def morph(mask: np.ndarray, op: str, kernel_radius: int = 1) -> np.ndarray:
    """Set morphology with a square (2r+1) structuring element.

    close = dilate then erode, open = erode then dilate. The erosion inside
    `close` treats pixels beyond the border as set, keeping closing
    extensive; every other border is treated as empty.
    """
    mask = np.asarray(mask, dtype=bool)
    if kernel_radius < 1:
        raise ValueError("kernel_radius must be >= 1")
    se = np.ones((2 * kernel_radius + 1, 2 * kernel_radius + 1), dtype=bool)
    if op == "dilate":
        return ndimage.binary_dilation(mask, structure=se)
    if op == "erode":
        return ndimage.binary_erosion(mask, structure=se, border_value=0)
    if op == "close":
        d = ndimage.binary_dilation(mask, structure=se)
        return ndimage.binary_erosion(d, structure=se, border_value=1)
    if op == "open":
        e = ndimage.binary_erosion(mask, structure=se, border_value=0)
        return ndimage.binary_dilation(e, structure=se)
    raise ValueError(f"unknown morphology op {op!r}")


# ---------------------------------------------------------------------------
# resampling and normalization


def _axis_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centered coordinate mapping."""
    img = np.asarray(img, dtype=float)
    if out_w < 1 or out_h < 1:
        raise ValueError("output dims must be >= 1")
    h, w = img.shape[:2]
    if (out_h, out_w) == (h, w):
        return img.copy()
    y0, y1, fy = _axis_coords(out_h, h)
    x0, x1, fx = _axis_coords(out_w, w)
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def normalize(img: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """(H, W, 3) in [0,1] -> channel-first (3, H, W), (x - mean) / std."""
    img = ensure_rgb(img)
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    out = (img.astype(np.float32) - mean) / std
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def denormalize(chw: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Inverse of normalize: (3, H, W) -> (H, W, 3), clipped to [0, 1]."""
    mean = np.asarray(spec.mean, dtype=np.float32)
    std = np.asarray(spec.std, dtype=np.float32)
    return np.clip(chw.transpose(1, 2, 0) * std + mean, 0.0, 1.0)


# ---------------------------------------------------------------------------
# PNG boundary (the only I/O in this module)


def read_png(path) -> np.ndarray:
    """8-bit PNG -> float image in [0, 1]; grayscale (H, W) or RGB (H, W, 3)."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16"):
            im = im.convert("L")
            return np.asarray(im, dtype=np.float64) / 255.0
        im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    """Quantize [0, 1] floats to 8 bits and write a PNG."""
    img = np.asarray(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path, format="PNG")
