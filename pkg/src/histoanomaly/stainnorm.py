"""Reinhard color-statistics normalization in lalphabeta space.

Patches are mapped RGB -> LMS -> log10 -> lalphabeta, shifted and scaled
per channel so their statistics match a fixed target, and mapped back.
``RGB_TO_LMS`` is the standard Reinhard forward matrix; the return matrix
is its exact numerical inverse (the published 4-digit inverse introduces
round-trip errors of up to 2 intensity levels, which would break the
identity-transform contract of +-1).

Source statistics are computed per patch, over tissue pixels when a mask
is supplied. An alternative (per-slide source stats) would weight the
normalization differently; per-patch is this library's convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-6
STD_EPSILON = 1e-6

RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)

_D = np.diag([1.0 / np.sqrt(3.0), 1.0 / np.sqrt(6.0), 1.0 / np.sqrt(2.0)])
LMS_TO_LAB = _D @ np.array([[1.0, 1.0, 1.0],
                            [1.0, 1.0, -2.0],
                            [1.0, -1.0, 0.0]])
LAB_TO_LMS = np.array([[1.0, 1.0, 1.0],
                       [1.0, 1.0, -1.0],
                       [1.0, -2.0, 0.0]]) @ _D


@dataclass
class LabStats:
    """Per-channel mean and standard deviation in lalphabeta space."""

    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)
    clamped: bool = False  # set when a zero-variance channel was floored

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if not np.all(self.std > 0):
            raise ValueError("std components must be > 0")

    def to_json(self) -> str:
        """Serialize as {"mean": [...], "std": [...]} with 9 significant digits."""
        fmt = lambda v: [float(f"{x:.9g}") for x in v]
        return json.dumps({"mean": fmt(self.mean), "std": fmt(self.std)})

    @classmethod
    def from_json(cls, text: str) -> "LabStats":
        obj = json.loads(text)
        return cls(mean=np.array(obj["mean"]), std=np.array(obj["std"]))


def rgb_to_lab(pixels: np.ndarray) -> np.ndarray:
    """Map uint8 RGB pixels (..., 3) to lalphabeta (..., 3) float64."""
    rgb = np.asarray(pixels, dtype=np.float64)
    lms = rgb @ RGB_TO_LMS.T
    np.clip(lms, LOG_FLOOR, None, out=lms)
    return np.log10(lms) @ LMS_TO_LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Map lalphabeta back to uint8 RGB, clamping to [0, 255]."""
    lms = 10.0 ** (np.asarray(lab, dtype=np.float64) @ LAB_TO_LMS.T)
    rgb = lms @ LMS_TO_RGB.T
    return np.rint(np.clip(rgb, 0.0, 255.0)).astype(np.uint8)


def compute_stats(pixels: np.ndarray, mask: np.ndarray | None = None) -> LabStats:
    """Per-channel lalphabeta mean and population std of the selected pixels.

    ``mask`` (same height/width, boolean, True = keep) restricts the
    statistics to tissue pixels; otherwise all pixels count. A constant
    channel yields std clamped to 1e-6 and sets the ``clamped`` flag.
    """
    lab = rgb_to_lab(pixels).reshape(-1, 3)
    if mask is not None:
        lab = lab[np.asarray(mask, dtype=bool).reshape(-1)]
    if lab.shape[0] < 2:
        raise ValueError(f"need at least 2 pixels to compute stats, got {lab.shape[0]}")
    mean = lab.mean(axis=0)
    std = lab.std(axis=0)  # population std
    clamped = bool(np.any(std < STD_EPSILON))
    std = np.maximum(std, STD_EPSILON)
    return LabStats(mean=mean, std=std, clamped=clamped)


def normalize_lab(lab: np.ndarray, source: LabStats, target: LabStats) -> np.ndarray:
    """Affine channel remap in lalphabeta: match source stats to target."""
    scale = target.std / source.std
    return (lab - source.mean) * scale + target.mean


def normalize(pixels: np.ndarray, source: LabStats, target: LabStats) -> np.ndarray:
    """Reinhard-normalize a uint8 RGB patch toward the target statistics."""
    return lab_to_rgb(normalize_lab(rgb_to_lab(pixels), source, target))


def pooled_stats(stats: list[LabStats]) -> LabStats:
    """Pooled normalization target: arithmetic mean of per-slide stats."""
    if not stats:
        raise ValueError("need at least one LabStats to pool")
    mean = np.mean([s.mean for s in stats], axis=0)
    std = np.mean([s.std for s in stats], axis=0)
    return LabStats(mean=mean, std=std)
