"""Feature matrices: binary file format, OE deduplication, batch sampling.

Patch embeddings live in a FeatureMatrix: an (N, D) float32 array plus
one metadata record per row (slide id, patch offset, tissue class, label).
The on-disk format is little-endian and self-describing:

    magic 'HADF' | u16 version=1 | u16 flags=0 | u32 D | u64 N
    N * D float32, row-major
    u64 meta_len | meta_len bytes of JSON lines (one object per row)

Round-trips are bit-exact for every finite float32 value, including
negative zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .tiler import PatchCoord

MAGIC = b"HADF"
VERSION = 1

TISSUE_CLASSES = ("normal_target", "near_oe", "far_oe", "eval")
LABELS = ("normal", "anomalous", "unknown")


class FeatureFileError(Exception):
    """Base error for feature-file I/O."""


class BadMagicError(FeatureFileError):
    """File does not start with the HADF magic or has a bad header."""


class DimMismatchError(FeatureFileError):
    """Feature dimension differs from what the caller expected."""


class TruncatedPayloadError(FeatureFileError):
    """Declared row or metadata counts exceed what the file contains."""


@dataclass(frozen=True)
class PatchMeta:
    """Row metadata: where the patch came from and how it is tagged."""

    slide_id: str
    x: int
    y: int
    tissue_class: str = "eval"
    label: str = "unknown"

    def __post_init__(self):
        if self.tissue_class not in TISSUE_CLASSES:
            raise ValueError(f"unknown tissue_class {self.tissue_class!r}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")

    @property
    def coord(self) -> PatchCoord:
        return PatchCoord(slide_id=self.slide_id, x=self.x, y=self.y)


@dataclass
class FeatureMatrix:
    """N patch embeddings of width D with per-row metadata."""

    rows: np.ndarray  # (N, D) float32
    meta: list[PatchMeta]

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ValueError("rows must be a 2-D array")
        if len(self.meta) != self.rows.shape[0]:
            raise ValueError(f"meta length {len(self.meta)} != row count {self.rows.shape[0]}")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def labels(self) -> np.ndarray:
        """Binary labels: 0 for 'normal' rows, 1 otherwise."""
        return np.array([0 if m.label == "normal" else 1 for m in self.meta], dtype=np.int64)

    def take(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx)
        return FeatureMatrix(rows=self.rows[idx], meta=[self.meta[i] for i in idx])


def write_features(m: FeatureMatrix, path) -> None:
    meta_lines = "\n".join(
        json.dumps({"slide_id": r.slide_id, "x": r.x, "y": r.y,
                    "tissue_class": r.tissue_class, "label": r.label})
        for r in m.meta
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HHIQ", VERSION, 0, m.dim, m.n))
        f.write(np.ascontiguousarray(m.rows, dtype="<f4").tobytes())
        f.write(struct.pack("<Q", len(meta_lines)))
        f.write(meta_lines)


def read_features(path, expect_dim: int | None = None) -> FeatureMatrix:
    """Read a feature file; rejects bad magic, wrong dims, truncated data."""
    with open(path, "rb") as f:
        head = f.read(4 + struct.calcsize("<HHIQ"))
        if len(head) < 4 + struct.calcsize("<HHIQ") or head[:4] != MAGIC:
            raise BadMagicError(f"{path}: not a feature file (bad magic or short header)")
        version, _flags, dim, n = struct.unpack("<HHIQ", head[4:])
        if version != VERSION:
            raise BadMagicError(f"{path}: unsupported version {version}")
        if expect_dim is not None and dim != expect_dim:
            raise DimMismatchError(f"{path}: dim {dim}, expected {expect_dim}")
        payload = f.read(n * dim * 4)
        if len(payload) < n * dim * 4:
            raise TruncatedPayloadError(f"{path}: declared {n} rows of dim {dim}, payload short")
        rows = np.frombuffer(payload, dtype="<f4").reshape(n, dim).copy()
        lenbuf = f.read(8)
        if len(lenbuf) < 8:
            raise TruncatedPayloadError(f"{path}: missing metadata length")
        (meta_len,) = struct.unpack("<Q", lenbuf)
        meta_bytes = f.read(meta_len)
        if len(meta_bytes) < meta_len:
            raise TruncatedPayloadError(f"{path}: metadata block short")
    meta = []
    if meta_bytes:
        for line in meta_bytes.decode("utf-8").split("\n"):
            obj = json.loads(line)
            meta.append(PatchMeta(slide_id=obj["slide_id"], x=int(obj["x"]), y=int(obj["y"]),
                                  tissue_class=obj["tissue_class"], label=obj["label"]))
    if len(meta) != n:
        raise TruncatedPayloadError(f"{path}: {len(meta)} metadata rows for {n} feature rows")
    return FeatureMatrix(rows=rows, meta=meta)


# --- cosine similarity and OE deduplication -------------------------------

@dataclass
class OeFilterConfig:
    """Cosine-similarity cutoff for removing near-duplicate OE rows."""

    cosine_threshold: float = 0.9

    def __post_init__(self):
        if not -1.0 <= self.cosine_threshold <= 1.0:
            raise ValueError("cosine_threshold must be in [-1, 1]")


class UndefinedSimilarityError(ValueError):
    """Cosine similarity is undefined for a zero vector."""


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|); raises for zero vectors or mismatched dims."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"dim mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine similarity undefined for zero vector")
    return float(u @ v / (nu * nv))


def dedup_oe(oe: FeatureMatrix, normal: FeatureMatrix,
             cfg: OeFilterConfig | None = None) -> FeatureMatrix:
    """Drop OE rows too similar to any normal row.

    A row is removed when its maximum cosine similarity to the normal set
    is strictly greater than the threshold; ties at the threshold are
    kept. Exact all-pairs comparison, O(N*M*D); input order is preserved.
    """
    if cfg is None:
        cfg = OeFilterConfig()
    if oe.dim != normal.dim:
        raise ValueError(f"dim mismatch: oe {oe.dim} vs normal {normal.dim}")
    if oe.n == 0 or normal.n == 0:
        return FeatureMatrix(rows=oe.rows.copy(), meta=list(oe.meta))
    a = oe.rows.astype(np.float64)
    b = normal.rows.astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise UndefinedSimilarityError("zero vector in dedup input")
    sims = (a / na[:, None]) @ (b / nb[:, None]).T
    keep = sims.max(axis=1) <= cfg.cosine_threshold
    return oe.take(np.flatnonzero(keep))


# --- balanced batch sampling ----------------------------------------------

@dataclass
class OeSamplerConfig:
    """Batch composition for outlier-exposure training.

    Half of every batch is normal data; the OE half splits evenly between
    near and far tissue pools.
    """

    batch_size: int = 32
    normal_fraction: float = 0.5
    near_fraction_of_oe: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size % 2 != 0:
            raise ValueError("batch_size must be even")
        for name in ("normal_fraction", "near_fraction_of_oe"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def sample_batch(normal: FeatureMatrix, near: FeatureMatrix, far: FeatureMatrix,
                 cfg: OeSamplerConfig, rng: np.random.Generator,
                 ) -> tuple[FeatureMatrix, np.ndarray, np.random.Generator]:
    """Draw one balanced training batch.

    Returns (batch, labels, rng): batch_size/2 normal rows (label 0) then
    batch_size/4 near-OE and batch_size/4 far-OE rows (label 1), drawn
    uniformly with replacement. The generator is advanced and returned;
    callers thread it through successive draws for determinism.
    """
    if cfg.batch_size % 4 != 0:
        raise ValueError("batch_size must be divisible by 4")
    for name, pool in (("normal", normal), ("near", near), ("far", far)):
        if pool.n == 0:
            raise ValueError(f"{name} pool is empty")
    n_norm = cfg.batch_size // 2
    n_each = cfg.batch_size // 4
    i_norm = rng.integers(0, normal.n, n_norm)
    i_near = rng.integers(0, near.n, n_each)
    i_far = rng.integers(0, far.n, n_each)
    rows = np.vstack([normal.rows[i_norm], near.rows[i_near], far.rows[i_far]])
    meta = ([normal.meta[i] for i in i_norm]
            + [near.meta[i] for i in i_near]
            + [far.meta[i] for i in i_far])
    labels = np.concatenate([np.zeros(n_norm, dtype=np.int64),
                             np.ones(2 * n_each, dtype=np.int64)])
    return FeatureMatrix(rows=rows, meta=meta), labels, rng


# --- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    path: str
    tissue_class: str
    label: str
    diagnosis_group: str = ""


def read_manifest(path) -> list[ManifestEntry]:
    """Read a slide manifest: slide_id,path,tissue_class,label,diagnosis_group."""
    import csv
    entries = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            entries.append(ManifestEntry(
                slide_id=row["slide_id"], path=row["path"],
                tissue_class=row["tissue_class"], label=row["label"],
                diagnosis_group=row.get("diagnosis_group", "") or ""))
    return entries


def write_manifest(entries: list[ManifestEntry], path) -> None:
    import csv
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["slide_id", "path", "tissue_class", "label", "diagnosis_group"])
        for e in entries:
            writer.writerow([e.slide_id, e.path, e.tissue_class, e.label, e.diagnosis_group])
