"""Tissue detection and patch enumeration over slide rasters.

A slide is a plain 8-bit RGB raster (PNG or binary PPM stand in for
pyramidal slide formats). Tissue pixels are found with an HSV rule
(saturated and not too bright), smoothed with one pass of 3x3 majority
voting, and the tissue mask drives enumeration of a fixed-size patch grid
anchored at the top-left corner. Patches whose window is more than
``max_background_fraction`` background are dropped; the threshold is
inclusive (exactly 80% background is kept).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from PIL import Image

DEFAULT_PATCH_SIZE = 340
HEATMAP_OVERLAP = 75
DEFAULT_MAX_BACKGROUND_FRACTION = 0.80


@dataclass
class SlideRaster:
    """8-bit RGB raster with a slide id and informational resolution."""

    id: str
    pixels: np.ndarray  # (H, W, 3) uint8
    mpp: float = 0.5

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"raster must be (H, W, 3), got {self.pixels.shape}")
        if self.height < 1 or self.width < 1:
            raise ValueError("raster must have width >= 1 and height >= 1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class TissueMask:
    """Per-pixel tissue flags matching a raster's dimensions."""

    bits: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("mask must be 2-D")

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass
class TileSpec:
    """Patch grid geometry and the background rejection threshold."""

    patch_size: int = DEFAULT_PATCH_SIZE
    stride: int = DEFAULT_PATCH_SIZE
    max_background_fraction: float = DEFAULT_MAX_BACKGROUND_FRACTION

    def __post_init__(self):
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError(f"require 1 <= stride <= patch_size, got stride={self.stride}")
        if not 0.0 <= self.max_background_fraction <= 1.0:
            raise ValueError("max_background_fraction must be in [0, 1]")

    @classmethod
    def for_heatmap(cls, patch_size: int = DEFAULT_PATCH_SIZE,
                    overlap: int = HEATMAP_OVERLAP, **kw) -> "TileSpec":
        """Overlapping grid used for heatmaps: stride = patch_size - overlap."""
        return cls(patch_size=patch_size, stride=patch_size - overlap, **kw)


@dataclass(frozen=True)
class PatchCoord:
    """Top-left pixel offset of one patch on one slide."""

    slide_id: str
    x: int
    y: int


@dataclass
class TissueDetectConfig:
    """HSV thresholds: tissue iff saturation > s_min and value < v_max."""

    saturation_min: float = 0.05
    value_max: float = 0.98


def detect_tissue(raster: SlideRaster, config: TissueDetectConfig | None = None) -> TissueMask:
    """Mark tissue pixels of a raster.

    A pixel is raw tissue when its HSV saturation exceeds
    ``config.saturation_min`` and its value is below ``config.value_max``
    (white background fails the saturation test). The raw mask is then
    smoothed by one pass of 3x3 majority voting with replicated edges.
    Deterministic for fixed input and config.
    """
    if config is None:
        config = TissueDetectConfig()
    rgb = raster.pixels.astype(np.float64) / 255.0
    v = rgb.max(axis=2)
    c = v - rgb.min(axis=2)
    with np.errstate(invalid="ignore"):
        s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    raw = (s > config.saturation_min) & (v < config.value_max)
    return TissueMask(bits=_majority_3x3(raw))


def _majority_3x3(mask: np.ndarray) -> np.ndarray:
    """One pass of 3x3 majority voting, edges replicated."""
    padded = np.pad(mask.astype(np.uint8), 1, mode="edge")
    counts = np.zeros(mask.shape, dtype=np.uint8)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            counts += padded[dy:dy + mask.shape[0], dx:dx + mask.shape[1]]
    return counts >= 5


def background_fraction(mask: TissueMask, coord: PatchCoord, patch_size: int) -> float:
    """Fraction of non-tissue pixels in the patch window, in [0, 1]."""
    if coord.x < 0 or coord.y < 0 or \
            coord.x + patch_size > mask.width or coord.y + patch_size > mask.height:
        raise ValueError(f"patch at ({coord.x}, {coord.y}) size {patch_size} "
                         f"exceeds mask bounds {mask.width}x{mask.height}")
    window = mask.bits[coord.y:coord.y + patch_size, coord.x:coord.x + patch_size]
    return float(np.count_nonzero(~window)) / (patch_size * patch_size)


def enumerate_patches(mask: TissueMask, spec: TileSpec, slide_id: str = "") -> list[PatchCoord]:
    """Enumerate grid patches that pass the background filter.

    Grid positions are x = i*stride, y = j*stride anchored at (0, 0);
    partial windows at the right/bottom edges are dropped. A position is
    kept when its background fraction does not exceed
    ``spec.max_background_fraction`` (inclusive at the threshold). The
    result is sorted row-major (y, then x).
    """
    p, s = spec.patch_size, spec.stride
    h, w = mask.height, mask.width
    if w < p or h < p:
        return []
    xs = range(0, w - p + 1, s)
    ys = range(0, h - p + 1, s)

    # summed-area table of tissue counts, so each window is O(1)
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask.bits, axis=0), axis=1, out=sat[1:, 1:])
    limit = spec.max_background_fraction * (p * p)

    coords = []
    for y in ys:
        for x in xs:
            tissue = sat[y + p, x + p] - sat[y, x + p] - sat[y + p, x] + sat[y, x]
            if (p * p) - tissue <= limit:
                coords.append(PatchCoord(slide_id=slide_id, x=x, y=y))
    return coords


# --- raster and mask I/O ------------------------------------------------

def read_raster(path, slide_id: str | None = None, mpp: float = 0.5) -> SlideRaster:
    """Load a PNG or binary PPM (P6) raster as a SlideRaster."""
    import os
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if slide_id is None:
        slide_id = os.path.splitext(os.path.basename(str(path)))[0]
    return SlideRaster(id=slide_id, pixels=pixels, mpp=mpp)


def write_mask_png(mask: TissueMask, path) -> None:
    """Write a mask as 8-bit grayscale PNG, 0 = background, 255 = tissue."""
    img = (mask.bits.astype(np.uint8)) * 255
    Image.fromarray(img, mode="L").save(path, format="PNG")


def read_mask_png(path) -> TissueMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return TissueMask(bits=arr >= 128)


def write_patch_csv(coords: list[PatchCoord], path) -> None:
    """Write enumerated patches as CSV with header slide_id,x,y."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["slide_id", "x", "y"])
        for c in coords:
            writer.writerow([c.slide_id, c.x, c.y])


def read_patch_csv(path) -> list[PatchCoord]:
    coords = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            coords.append(PatchCoord(slide_id=row["slide_id"], x=int(row["x"]), y=int(row["y"])))
    return coords
