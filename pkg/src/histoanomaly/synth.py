"""Synthetic data with known ground truth.

Feature pools are Gaussian clusters: normal at the base mean, anomalous
shifted by a controllable vector, near-OE halfway along the shift, far-OE
at a distant mean. Rasters are white canvases painted with colored
rectangles whose anomaly regions come back as annotation polygons. Both
generators are deterministic per seed (Box-Muller over the counter RNG,
one child stream per pool).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .evaluation import AnnotationRegion
from .features import FeatureMatrix, PatchMeta
from .tiler import SlideRaster, TissueMask

FAR_OFFSET = 10.0  # |mu_far - mu0| in units of sigma; far pool stays far even at delta = 0


@dataclass
class SynthSpec:
    """Gaussian feature-pool layout.

    ``delta`` is the anomaly shift vector; near-OE sits at delta/2 and the
    far pool at ``far_offset`` units along the normalized all-ones
    direction. Covariances are diagonal (``sigma`` per coordinate).
    """

    dim: int = 16
    n_normal: int = 2000
    n_anomalous: int = 200
    n_near_oe: int = 1000
    n_far_oe: int = 1000
    sigma: float = 1.0
    delta: np.ndarray | None = None  # defaults to zero shift
    mean: np.ndarray | None = None   # defaults to the origin
    far_offset: float = FAR_OFFSET
    seed: int = 0

    def __post_init__(self):
        for name in ("n_normal", "n_anomalous", "n_near_oe", "n_far_oe"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        self.mean = (np.zeros(self.dim) if self.mean is None
                     else np.asarray(self.mean, dtype=np.float64).reshape(self.dim))
        self.delta = (np.zeros(self.dim) if self.delta is None
                      else np.asarray(self.delta, dtype=np.float64).reshape(self.dim))

    @classmethod
    def with_separation(cls, separation: float, **kw) -> "SynthSpec":
        """Spec whose anomaly shift has |delta| = separation * sigma."""
        spec = cls(**kw)
        direction = np.full(spec.dim, 1.0 / np.sqrt(spec.dim))
        spec.delta = direction * separation * spec.sigma
        return spec

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        obj = json.loads(text)
        sep = obj.pop("separation", None)
        if sep is not None:
            return cls.with_separation(sep, **obj)
        return cls(**obj)


def _box_muller(gen: np.random.Generator, n: int) -> np.ndarray:
    """n standard normals via Box-Muller on uniform draws."""
    pairs = (n + 1) // 2
    u1 = 1.0 - gen.random(pairs)  # (0, 1], keeps log finite
    u2 = gen.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n]


def _gaussian_pool(gen: np.random.Generator, n: int, mean: np.ndarray,
                   sigma: float, dim: int) -> np.ndarray:
    z = _box_muller(gen, n * dim).reshape(n, dim)
    return mean + sigma * z


def gen_features(spec: SynthSpec) -> dict[str, FeatureMatrix]:
    """Generate the four pools: normal, anomalous, near_oe, far_oe.

    Pool streams are spawned from the spec seed in that fixed order, so
    each pool is individually reproducible.
    """
    gens = _rng.spawn(spec.seed, 4)
    mu = spec.mean
    far_mu = mu + np.full(spec.dim, 1.0 / np.sqrt(spec.dim)) * spec.far_offset * spec.sigma

    def pool(gen, n, mean, slide_prefix, tissue_class, label):
        rows = _gaussian_pool(gen, n, mean, spec.sigma, spec.dim).astype(np.float32)
        meta = [PatchMeta(slide_id=f"{slide_prefix}{i:05d}", x=0, y=0,
                          tissue_class=tissue_class, label=label) for i in range(n)]
        return FeatureMatrix(rows=rows, meta=meta)

    return {
        "normal": pool(gens[0], spec.n_normal, mu, "norm", "normal_target", "normal"),
        "anomalous": pool(gens[1], spec.n_anomalous, mu + spec.delta, "anom", "eval", "anomalous"),
        "near_oe": pool(gens[2], spec.n_near_oe, mu + spec.delta / 2.0, "near", "near_oe", "unknown"),
        "far_oe": pool(gens[3], spec.n_far_oe, far_mu, "far", "far_oe", "unknown"),
    }


# --- toy rasters -----------------------------------------------------------------

TISSUE_COLOR = (200, 130, 150)
ANOMALY_COLOR = (130, 60, 140)
OTHER_COLOR = (170, 90, 110)
ARTIFACT_COLOR = (40, 40, 200)

_KIND_COLORS = {
    "tissue": TISSUE_COLOR,
    "anomaly": ANOMALY_COLOR,
    "other_anomalous": OTHER_COLOR,
    "artifact": ARTIFACT_COLOR,
}
_KIND_TO_ANNOTATION = {
    "anomaly": "diagnosis_defining",
    "other_anomalous": "other_anomalous",
    "artifact": "artifact",
}


@dataclass
class RasterLayout:
    """Scripted raster: white canvas with colored rectangles.

    Each rectangle is {kind, x, y, w, h, color?}; kinds: tissue, anomaly,
    other_anomalous, artifact. Anomaly rectangles may not overlap each
    other (contradictory ground truth is rejected).
    """

    width: int
    height: int
    slide_id: str = "synth"
    rectangles: list[dict] = field(default_factory=list)

    @classmethod
    def from_json(cls, text: str) -> "RasterLayout":
        return cls(**json.loads(text))


def gen_raster(layout: RasterLayout) -> tuple[SlideRaster, TissueMask, list[AnnotationRegion]]:
    """Paint the layout and return raster, true tissue mask, annotations."""
    pixels = np.full((layout.height, layout.width, 3), 255, dtype=np.uint8)
    mask = np.zeros((layout.height, layout.width), dtype=bool)
    regions = []
    anomaly_boxes = []
    for rect in layout.rectangles:
        kind = rect["kind"]
        if kind not in _KIND_COLORS:
            raise ValueError(f"unknown rectangle kind {kind!r}")
        x, y, w, h = int(rect["x"]), int(rect["y"]), int(rect["w"]), int(rect["h"])
        if w <= 0 or h <= 0 or x < 0 or y < 0 or \
                x + w > layout.width or y + h > layout.height:
            raise ValueError(f"rectangle {rect} outside canvas")
        if kind == "anomaly":
            for bx, by, bw, bh in anomaly_boxes:
                if x < bx + bw and bx < x + w and y < by + bh and by < y + h:
                    raise ValueError("overlapping anomaly rectangles are contradictory")
            anomaly_boxes.append((x, y, w, h))
        color = tuple(rect.get("color", _KIND_COLORS[kind]))
        pixels[y:y + h, x:x + w] = color
        mask[y:y + h, x:x + w] = True
        if kind in _KIND_TO_ANNOTATION:
            poly = np.array([[x, y], [x + w, y], [x + w, y + h], [x, y + h]], dtype=np.float64)
            regions.append(AnnotationRegion(kind=_KIND_TO_ANNOTATION[kind], polygon=poly))
    raster = SlideRaster(id=layout.slide_id, pixels=pixels)
    return raster, TissueMask(bits=mask), regions
