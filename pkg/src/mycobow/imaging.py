"""Scan preprocessing: contrast stretching, downscaling, segmentation,
and foreground/background gated patch grids.

All functions are pure; determinism for a fixed seed is part of the
contract so per-scan work can run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .dataset import Scan
from .errors import DegenerateImage, ImageTooSmall

GATE_FG = "fg"
GATE_BG = "bg"
GATE_SKIP = "skip"

NOISE_AMPLITUDE = 0.02  # additive uniform noise range for augmentation


@dataclass
class NormalizedImage:
    """Real-valued image with every pixel in [0, 1]."""

    pixels: np.ndarray  # HxW or HxWx3 float32
    scale_factor: float = 1.0


@dataclass
class ForegroundMask:
    """Boolean pixel mask, True = foreground (fungal material)."""

    bits: np.ndarray

    @property
    def shape(self):
        return self.bits.shape


@dataclass(frozen=True)
class PatchSpec:
    """Patch geometry and the FBP gates.

    Ratios are foreground:background, so a ratio r gates on the foreground
    fraction r / (r + 1). The defaults implement the 2:1 foreground gate
    and the 1:100 background gate.
    """

    patch_size: int = 500
    stride: int = 250
    fg_min_ratio: float = 2.0
    bg_max_ratio: float = 0.01

    def __post_init__(self):
        if not 0 < self.stride <= self.patch_size:
            raise ValueError(
                f"stride must be in (0, patch_size], got {self.stride}"
            )
        if self.fg_min_ratio <= self.bg_max_ratio:
            raise ValueError("fg_min_ratio must exceed bg_max_ratio")

    @property
    def fg_threshold(self) -> float:
        return self.fg_min_ratio / (1.0 + self.fg_min_ratio)

    @property
    def bg_threshold(self) -> float:
        return self.bg_max_ratio / (1.0 + self.bg_max_ratio)


@dataclass
class PatchGrid:
    """Stride-spaced patch positions with their FBP gates."""

    patch_size: int
    entries: list = field(default_factory=list)  # (row, col, gate)

    def positions(self, gate=None):
        if gate is None:
            return [(r, c) for r, c, _ in self.entries]
        return [(r, c) for r, c, g in self.entries if g == gate]


def compute_intensity_limits(scan: Scan, low_pct: float = 1.0,
                             high_pct: float = 99.0):
    """Percentile intensity limits of one scan, for contrast stretching.

    Raises DegenerateImage when the limits coincide (constant image).
    """
    if not 0 <= low_pct < high_pct <= 100:
        raise ValueError("need 0 <= low_pct < high_pct <= 100")
    values = np.asarray(scan.pixels, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("scan is empty")
    lo, hi = np.percentile(values, [low_pct, high_pct])
    if lo == hi:
        raise DegenerateImage(
            f"scan {scan.scan_id}: intensity limits collapse at {lo}"
        )
    return float(lo), float(hi)


def stretch_contrast(scan: Scan, lo: float, hi: float) -> NormalizedImage:
    """Map intensities linearly so [lo, hi] covers [0, 1], clamping outside."""
    if lo >= hi:
        raise ValueError("lo must be below hi")
    pixels = np.asarray(scan.pixels, dtype=np.float32)
    stretched = (pixels - lo) / (hi - lo)
    np.clip(stretched, 0.0, 1.0, out=stretched)
    return NormalizedImage(pixels=stretched, scale_factor=1.0)


def downscale(img: NormalizedImage, factor: float) -> NormalizedImage:
    """Bicubic resize by ``factor``; output stays clamped to [0, 1]."""
    if not 0 < factor <= 1:
        raise ValueError("factor must be in (0, 1]")
    if factor == 1.0:
        return NormalizedImage(img.pixels.copy(), img.scale_factor)
    h, w = img.pixels.shape[:2]
    # round half away from zero so dimensions match round(dim * factor)
    out_h = int(np.floor(h * factor + 0.5))
    out_w = int(np.floor(w * factor + 0.5))
    resized = cv2.resize(img.pixels, (out_w, out_h),
                         interpolation=cv2.INTER_CUBIC)
    np.clip(resized, 0.0, 1.0, out=resized)
    return NormalizedImage(pixels=resized,
                           scale_factor=img.scale_factor * factor)


def grayscale(pixels: np.ndarray) -> np.ndarray:
    """Channel mean; Gram-stained material is judged by brightness alone."""
    if pixels.ndim == 2:
        return pixels
    return pixels.mean(axis=2)


def segment_foreground(img: NormalizedImage, blur_sigma: float = 5.0,
                       threshold: float = 0.5) -> ForegroundMask:
    """Threshold a grayscaled, blurred image; darker pixels are foreground.

    With blur_sigma == 0 this degenerates to per-pixel thresholding.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    if blur_sigma < 0:
        raise ValueError("blur_sigma must be >= 0")
    gray = np.asarray(grayscale(img.pixels), dtype=np.float64)
    if blur_sigma > 0:
        gray = cv2.GaussianBlur(gray, (0, 0), blur_sigma,
                                borderType=cv2.BORDER_REPLICATE)
    return ForegroundMask(bits=gray < threshold)


def extract_patch_grid(mask: ForegroundMask, spec: PatchSpec) -> PatchGrid:
    """Gate every stride-spaced patch position by its foreground fraction.

    Gates: fraction >= fg_threshold -> fg, fraction < bg_threshold -> bg,
    anything between -> skip.
    """
    h, w = mask.bits.shape
    p = spec.patch_size
    if h < p or w < p:
        raise ImageTooSmall(f"mask {h}x{w} cannot hold a {p}x{p} patch")
    rows = range(0, h - p + 1, spec.stride)
    cols = range(0, w - p + 1, spec.stride)

    # integral image makes each patch sum O(1)
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask.bits, axis=0), axis=1,
              out=integral[1:, 1:])

    area = float(p * p)
    grid = PatchGrid(patch_size=p)
    for r in rows:
        for c in cols:
            fg = (integral[r + p, c + p] - integral[r, c + p]
                  - integral[r + p, c] + integral[r, c])
            fraction = fg / area
            if fraction >= spec.fg_threshold:
                gate = GATE_FG
            elif fraction < spec.bg_threshold:
                gate = GATE_BG
            else:
                gate = GATE_SKIP
            grid.entries.append((r, c, gate))
    return grid


def crop_patch(pixels: np.ndarray, row: int, col: int, size: int):
    return pixels[row:row + size, col:col + size]


def augment_patch(patch_pixels: np.ndarray, seed: int) -> list:
    """Six deterministic variants of a square patch.

    Identity, the three rotations, the horizontal mirror, and one additive
    uniform-noise draw (clamped back to [0, 1]).
    """
    if patch_pixels.shape[0] != patch_pixels.shape[1]:
        raise ValueError("patch must be square")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE,
                        size=patch_pixels.shape)
    noisy = np.clip(patch_pixels + noise, 0.0, 1.0)
    return [
        patch_pixels.copy(),
        np.rot90(patch_pixels, 1).copy(),
        np.rot90(patch_pixels, 2).copy(),
        np.rot90(patch_pixels, 3).copy(),
        np.fliplr(patch_pixels).copy(),
        noisy.astype(patch_pixels.dtype),
    ]


def save_mask(mask: ForegroundMask, path) -> None:
    """Write the mask as an 8-bit image, 255 = foreground."""
    cv2.imwrite(str(path), mask.bits.astype(np.uint8) * 255)


def load_mask(path) -> ForegroundMask:
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise FileNotFoundError(f"cannot read mask {path}")
    return ForegroundMask(bits=raw >= 128)
