"""Patch anomaly scores, slide aggregation, and heatmaps.

Scores come either from a trained head (classifier probability, center
distance, radius, or reconstruction error depending on the objective) or
from kNN distances to a normal reference set. Per-slide scores are the
mean of the top-fraction highest patch scores; heatmaps average the
scores of overlapping patch windows per pixel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .features import FeatureMatrix
from .models import MlpParams, TrainedModel, _sigmoid, forward
from .tiler import PatchCoord


@dataclass
class KnnConfig:
    """k-nearest-neighbor scoring in feature space.

    ``mode`` selects the score: 'mean' averages the k smallest Euclidean
    distances; 'kth' takes the k-th smallest alone.
    """

    k: int = 5
    metric: str = "euclidean"
    mode: str = "mean"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.metric != "euclidean":
            raise ValueError("only the euclidean metric is supported")
        if self.mode not in ("mean", "kth"):
            raise ValueError("mode must be 'mean' or 'kth'")


def knn_score(query: np.ndarray, reference: FeatureMatrix,
              cfg: KnnConfig | None = None) -> float:
    """Mean distance from the query to its k nearest reference rows."""
    if cfg is None:
        cfg = KnnConfig()
    if cfg.k > reference.n:
        raise ValueError(f"k={cfg.k} exceeds reference size {reference.n}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != reference.dim:
        raise ValueError(f"query dim {q.shape[0]} != reference dim {reference.dim}")
    d = np.sqrt(((reference.rows.astype(np.float64) - q) ** 2).sum(axis=1))
    smallest = np.partition(d, cfg.k - 1)[:cfg.k]
    if cfg.mode == "kth":
        return float(smallest.max())
    return float(smallest.mean())


def knn_score_batch(queries: np.ndarray, reference: FeatureMatrix,
                    cfg: KnnConfig | None = None) -> np.ndarray:
    """Vectorized knn_score over query rows."""
    if cfg is None:
        cfg = KnnConfig()
    if cfg.k > reference.n:
        raise ValueError(f"k={cfg.k} exceeds reference size {reference.n}")
    q = np.asarray(queries, dtype=np.float64)
    ref = reference.rows.astype(np.float64)
    out = np.empty(q.shape[0])
    # chunked so the distance matrix stays modest
    chunk = max(1, int(2_000_000 / max(1, ref.shape[0])))
    for start in range(0, q.shape[0], chunk):
        block = q[start:start + chunk]
        d2 = ((block[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        d = np.sqrt(d2)
        part = np.partition(d, cfg.k - 1, axis=1)[:, :cfg.k]
        out[start:start + chunk] = part.max(axis=1) if cfg.mode == "kth" else part.mean(axis=1)
    return out


def classifier_score(params: MlpParams, x: np.ndarray) -> float:
    """Anomaly probability sigmoid(logit) of a width-1 classifier head."""
    if params.out_dim != 1:
        raise ValueError("classifier head must have output width 1")
    logit = forward(params, x)
    return float(_sigmoid(np.asarray(logit).reshape(-1)[0]))


def model_score_batch(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    """Per-row anomaly scores under a trained head.

    bce: sigmoid(logit). hsc: pseudo-Huber radius. deepsad/compactness:
    squared distance to the frozen center. autoencoder: per-dimension
    mean squared reconstruction error.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    out = forward(model.params, x)
    if model.objective == "bce":
        return _sigmoid(out[:, 0])
    if model.objective == "hsc":
        return np.sqrt((out ** 2).sum(axis=1) + 1.0) - 1.0
    if model.objective in ("deepsad", "compactness"):
        diff = out - model.center.c
        return (diff ** 2).sum(axis=1)
    if model.objective == "autoencoder":
        return ((out - x) ** 2).sum(axis=1) / x.shape[1]
    raise ValueError(f"unknown objective {model.objective!r}")


# --- test-time augmentation ---------------------------------------------------

@dataclass
class TtaConfig:
    """Number of augmented views averaged into one patch score."""

    n_views: int = 10


def tta_score(view_scores) -> float:
    """Arithmetic mean of per-view scores; callers supply the view scores."""
    scores = list(view_scores)
    if not scores:
        raise ValueError("tta_score needs at least one view score")
    return float(np.mean(np.asarray(scores, dtype=np.float64)))


# --- score tables and aggregation ----------------------------------------------

@dataclass
class ScoreTable:
    """Per-patch anomaly scores keyed by (slide_id, x, y)."""

    coords: list[PatchCoord]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.coords) != self.scores.shape[0]:
            raise ValueError("coords and scores length mismatch")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        keys = {(c.slide_id, c.x, c.y) for c in self.coords}
        if len(keys) != len(self.coords):
            raise ValueError("duplicate (slide, x, y) keys")

    def slide_ids(self) -> list[str]:
        seen = dict.fromkeys(c.slide_id for c in self.coords)
        return list(seen)

    def for_slide(self, slide_id: str) -> "ScoreTable":
        idx = [i for i, c in enumerate(self.coords) if c.slide_id == slide_id]
        return ScoreTable(coords=[self.coords[i] for i in idx], scores=self.scores[idx])


def write_score_csv(table: ScoreTable, path) -> None:
    """CSV export: slide_id,x,y,score with 9 significant digits."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["slide_id", "x", "y", "score"])
        for c, s in zip(table.coords, table.scores):
            writer.writerow([c.slide_id, c.x, c.y, f"{s:.9g}"])


def read_score_csv(path) -> ScoreTable:
    coords, scores = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            coords.append(PatchCoord(slide_id=row["slide_id"], x=int(row["x"]), y=int(row["y"])))
            scores.append(float(row["score"]))
    return ScoreTable(coords=coords, scores=np.array(scores))


@dataclass
class AggregationConfig:
    """Slide score = mean of the top fraction of patch scores."""

    top_fraction: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must be in (0, 1]")


def aggregate_slide(table: ScoreTable, cfg: AggregationConfig | None = None) -> float:
    """Mean of the m = max(1, ceil(top_fraction * n)) highest patch scores."""
    if cfg is None:
        cfg = AggregationConfig()
    n = table.scores.shape[0]
    if n == 0:
        raise ValueError("slide has no patches")
    m = max(1, math.ceil(cfg.top_fraction * n))
    top = np.sort(table.scores)[::-1][:m]
    return float(np.mean(top))


# --- heatmaps --------------------------------------------------------------------

COLORMAPS = {
    # piecewise-linear between two RGB stops over [0, 1]
    "blue_red": ((0, 0, 255), (255, 0, 0)),
    "white_red": ((255, 255, 255), (255, 0, 0)),
}


@dataclass
class HeatmapCanvas:
    """Accumulator grid: per-pixel score sums and window counts."""

    score_sum: np.ndarray
    weight_count: np.ndarray
    colormap: str = "blue_red"

    @classmethod
    def blank(cls, width: int, height: int, colormap: str = "blue_red") -> "HeatmapCanvas":
        return cls(score_sum=np.zeros((height, width), dtype=np.float64),
                   weight_count=np.zeros((height, width), dtype=np.int64),
                   colormap=colormap)

    @property
    def width(self) -> int:
        return self.score_sum.shape[1]

    @property
    def height(self) -> int:
        return self.score_sum.shape[0]


def heatmap_accumulate(canvas: HeatmapCanvas, coord: PatchCoord, score: float,
                       patch_size: int) -> HeatmapCanvas:
    """Add one patch score over its pixel window."""
    if coord.x < 0 or coord.y < 0 or \
            coord.x + patch_size > canvas.width or coord.y + patch_size > canvas.height:
        raise ValueError(f"patch at ({coord.x}, {coord.y}) outside canvas")
    canvas.score_sum[coord.y:coord.y + patch_size, coord.x:coord.x + patch_size] += score
    canvas.weight_count[coord.y:coord.y + patch_size, coord.x:coord.x + patch_size] += 1
    return canvas


def heatmap_grid(canvas: HeatmapCanvas) -> np.ndarray:
    """Per-pixel averaged scores; NaN where no patch contributed."""
    covered = canvas.weight_count > 0
    grid = np.full(canvas.score_sum.shape, np.nan)
    grid[covered] = canvas.score_sum[covered] / canvas.weight_count[covered]
    return grid


def heatmap_render(canvas: HeatmapCanvas,
                   colormap: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Render the canvas to an RGBA image plus the raw averaged grid.

    Covered pixels interpolate linearly between the colormap's two stops
    (values clamped to [0, 1]); uncovered pixels are fully transparent.
    """
    name = colormap or canvas.colormap
    if name not in COLORMAPS:
        raise ValueError(f"unknown colormap {name!r}")
    low, high = (np.array(c, dtype=np.float64) for c in COLORMAPS[name])
    grid = heatmap_grid(canvas)
    covered = ~np.isnan(grid)
    t = np.clip(np.where(covered, grid, 0.0), 0.0, 1.0)[..., None]
    rgb = np.rint(low + t * (high - low)).astype(np.uint8)
    alpha = np.where(covered, 255, 0).astype(np.uint8)
    rgba = np.dstack([rgb, alpha])
    return rgba, grid


def write_heatmap_png(rgba: np.ndarray, path) -> None:
    Image.fromarray(rgba, mode="RGBA").save(path, format="PNG")
