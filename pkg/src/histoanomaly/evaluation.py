"""AUROC, cross-validation folds, sensitivity thresholds, group reports.

AUROC is the Mann-Whitney rank statistic with average ranks for ties,
equal to P(score_anom > score_norm) + 0.5 * P(equal). Sensitivity
thresholds pick the largest cutoff that keeps the requested fraction of
anomalies detected and report how many normal slides score safely below
it (the automatable fraction).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .tiler import PatchCoord

ANNOTATION_KINDS = ("diagnosis_defining", "other_anomalous", "artifact")
SENSITIVITY_TARGETS = (1.00, 0.99, 0.95)
DEFAULT_FOLDS = 5


@dataclass
class LabeledScores:
    """Parallel score/label lists with optional diagnosis-group tags."""

    scores: np.ndarray
    labels: list[str]  # 'normal' | 'anomalous'
    groups: list[str] | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.labels) != self.scores.shape[0]:
            raise ValueError("scores and labels length mismatch")
        if self.groups is not None and len(self.groups) != self.scores.shape[0]:
            raise ValueError("scores and groups length mismatch")
        bad = set(self.labels) - {"normal", "anomalous"}
        if bad:
            raise ValueError(f"unknown labels {bad}")

    @property
    def anomalous_mask(self) -> np.ndarray:
        return np.array([l == "anomalous" for l in self.labels])


class SingleClassError(ValueError):
    """AUROC is undefined when only one class is present."""


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.shape[0], dtype=np.float64)
    ranks[order] = np.arange(1, values.shape[0] + 1, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < sorted_vals.shape[0]:
        j = i
        while j + 1 < sorted_vals.shape[0] and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = (i + 1 + j + 1) / 2.0
        i = j + 1
    return ranks


def auroc(data: LabeledScores) -> float:
    """Rank-based AUROC; anomalous is the positive class."""
    pos = data.anomalous_mask
    n_pos = int(pos.sum())
    n_neg = pos.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs both classes present")
    ranks = _average_ranks(data.scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# --- fold plans -----------------------------------------------------------------

@dataclass
class FoldPlan:
    """Partition of normal slide ids into k test folds."""

    k: int
    assignments: dict[str, int]
    seed: int

    def fold_members(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f == fold]


def make_folds(normal_slide_ids: list[str], k: int = DEFAULT_FOLDS, seed: int = 0) -> FoldPlan:
    """Seeded shuffle then round-robin assignment; fold sizes differ by <= 1.

    Anomalous slides are never assigned: they belong to every fold's test
    set because no model trains on them.
    """
    ids = list(normal_slide_ids)
    if len(ids) < k:
        raise ValueError(f"need at least k={k} slides, got {len(ids)}")
    gen = _rng.generator(seed)
    order = gen.permutation(len(ids))
    assignments = {ids[int(j)]: int(i % k) for i, j in enumerate(order)}
    return FoldPlan(k=k, assignments=assignments, seed=seed)


# --- sensitivity thresholds -------------------------------------------------------

def sensitivity_threshold(data: LabeledScores,
                          target_sensitivity: float) -> tuple[float, float]:
    """Largest threshold keeping the target fraction of anomalies detected.

    Detection is inclusive (score >= t). Returns (threshold,
    automatable_fraction) where the fraction is the share of normal
    samples scoring strictly below the threshold.
    """
    if not 0.0 < target_sensitivity <= 1.0:
        raise ValueError("target_sensitivity must be in (0, 1]")
    pos = data.anomalous_mask
    anom = data.scores[pos]
    norm = data.scores[~pos]
    if anom.shape[0] == 0 or norm.shape[0] == 0:
        raise ValueError("sensitivity_threshold needs both classes present")
    # smallest m with m/n >= target; the (1 - 1e-12) factor forgives float
    # dust in the product without changing any honest case
    m = max(1, math.ceil(target_sensitivity * anom.shape[0] * (1.0 - 1e-12)))
    threshold = float(np.sort(anom)[::-1][m - 1])
    fraction = float(np.count_nonzero(norm < threshold)) / norm.shape[0]
    return threshold, fraction


# --- per-group reporting -----------------------------------------------------------

def group_report(data: LabeledScores) -> dict[str, float]:
    """AUROC per diagnosis group: all normals vs that group's anomalies.

    Groups tagged only on normal samples carry no anomalies to rank and
    are skipped with a warning.
    """
    if data.groups is None:
        raise ValueError("data has no group tags")
    pos = data.anomalous_mask
    norm_scores = data.scores[~pos]
    report: dict[str, float] = {}
    seen = dict.fromkeys(g for g in data.groups if g)
    for group in seen:
        idx = [i for i in range(len(data.labels)) if pos[i] and data.groups[i] == group]
        if not idx:
            warnings.warn(f"group {group!r} has no anomalous samples; skipped")
            continue
        scores = np.concatenate([norm_scores, data.scores[idx]])
        labels = ["normal"] * norm_scores.shape[0] + ["anomalous"] * len(idx)
        report[group] = auroc(LabeledScores(scores=scores, labels=labels))
    return report


# --- patch labels from polygon annotations ------------------------------------------

@dataclass
class AnnotationRegion:
    kind: str
    polygon: np.ndarray  # (V, 2) float64 vertices

    def __post_init__(self):
        if self.kind not in ANNOTATION_KINDS:
            raise ValueError(f"unknown annotation kind {self.kind!r}")
        self.polygon = np.asarray(self.polygon, dtype=np.float64)
        if self.polygon.ndim != 2 or self.polygon.shape[1] != 2:
            raise ValueError("polygon must be (V, 2)")
        # drop an explicit closing vertex
        if self.polygon.shape[0] > 1 and np.array_equal(self.polygon[0], self.polygon[-1]):
            self.polygon = self.polygon[:-1]
        if self.polygon.shape[0] < 3:
            raise ValueError("degenerate polygon: fewer than 3 distinct vertices")
        x, y = self.polygon[:, 0], self.polygon[:, 1]
        area2 = np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        if area2 == 0.0:
            raise ValueError("degenerate polygon: zero area")


def read_annotations(path) -> list[AnnotationRegion]:
    """Per-slide annotation JSON: a list of {kind, polygon: [[x, y], ...]}."""
    with open(path) as f:
        items = json.load(f)
    return [AnnotationRegion(kind=o["kind"], polygon=np.array(o["polygon"])) for o in items]


def write_annotations(regions: list[AnnotationRegion], path) -> None:
    items = [{"kind": r.kind, "polygon": [[float(x), float(y)] for x, y in r.polygon]}
             for r in regions]
    with open(path, "w") as f:
        json.dump(items, f, indent=1)


def point_in_polygon(px: float, py: float, polygon: np.ndarray) -> bool:
    """Even-odd rule; points exactly on an edge count as inside."""
    v = polygon
    n = v.shape[0]
    inside = False
    for i in range(n):
        x1, y1 = v[i]
        x2, y2 = v[(i + 1) % n]
        if _on_segment(px, py, x1, y1, x2, y2):
            return True
        if (y1 > py) != (y2 > py):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < x_cross:
                inside = not inside
    return inside


def _on_segment(px, py, x1, y1, x2, y2) -> bool:
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    if cross != 0.0:
        return False
    return min(x1, x2) <= px <= max(x1, x2) and min(y1, y2) <= py <= max(y1, y2)


@dataclass
class PatchLabels:
    """Outcome of matching patch centers against annotation regions.

    ``labels[i]`` is 'anomalous' (center in a diagnosis-defining region),
    'excluded' (center only in an other-anomalous region, left out of
    patch AUROC), or 'normal'. ``in_artifact[i]`` flags centers inside
    artifact regions for the separate artifact analysis.
    """

    labels: list[str]
    in_artifact: list[bool]


def patch_labels_from_annotations(coords: list[PatchCoord],
                                  regions: list[AnnotationRegion],
                                  patch_size: int) -> PatchLabels:
    """Label patches by their center point against annotation polygons."""
    diag = [r.polygon for r in regions if r.kind == "diagnosis_defining"]
    other = [r.polygon for r in regions if r.kind == "other_anomalous"]
    artifact = [r.polygon for r in regions if r.kind == "artifact"]
    labels, flags = [], []
    half = patch_size / 2.0
    for c in coords:
        cx, cy = c.x + half, c.y + half
        if any(point_in_polygon(cx, cy, p) for p in diag):
            labels.append("anomalous")
        elif any(point_in_polygon(cx, cy, p) for p in other):
            labels.append("excluded")
        else:
            labels.append("normal")
        flags.append(any(point_in_polygon(cx, cy, p) for p in artifact))
    return PatchLabels(labels=labels, in_artifact=flags)


# --- report container ----------------------------------------------------------------

@dataclass
class EvalReport:
    """Cross-validation summary: AUROC mean/std, groups, thresholds."""

    fold_aurocs: list[float]
    auroc_mean: float
    auroc_std: float
    group_aurocs: dict[str, dict[str, float]] = field(default_factory=dict)
    sensitivity: dict[str, dict[str, float]] = field(default_factory=dict)
    folds: int = DEFAULT_FOLDS
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "folds": self.folds,
            "seed": self.seed,
            "fold_aurocs": self.fold_aurocs,
            "auroc_mean": self.auroc_mean,
            "auroc_std": self.auroc_std,
            "group_aurocs": self.group_aurocs,
            "sensitivity": self.sensitivity,
        }, sort_keys=True, indent=1)

    def to_text(self) -> str:
        lines = [f"slide AUROC: {self.auroc_mean:.4f} +- {self.auroc_std:.4f} "
                 f"({self.folds}-fold CV, seed {self.seed})"]
        for i, a in enumerate(self.fold_aurocs):
            lines.append(f"  fold {i}: {a:.4f}")
        if self.group_aurocs:
            lines.append("per-group AUROC:")
            for g, stats in self.group_aurocs.items():
                lines.append(f"  {g}: {stats['mean']:.4f} +- {stats['std']:.4f}")
        if self.sensitivity:
            lines.append("sensitivity thresholds:")
            for t, entry in self.sensitivity.items():
                lines.append(f"  target {t}: threshold {entry['threshold']:.6g}, "
                             f"automatable fraction {entry['automatable_fraction']:.4f}")
        return "\n".join(lines)


def summarize_folds(fold_aurocs: list[float]) -> tuple[float, float]:
    """Mean and population standard deviation over fold AUROCs."""
    arr = np.asarray(fold_aurocs, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
