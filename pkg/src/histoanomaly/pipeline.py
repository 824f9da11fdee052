"""Orchestration: feature scoring over manifests and cross-validated eval.

Ties the modules together the way the CLI drives them: load feature files
per manifest, train (or pick a kNN reference), score every evaluation
patch with optional view averaging, aggregate per slide, and report
AUROCs over a seeded fold plan. Per-slide work can fan out over threads;
results are always reduced in manifest order so outputs stay
deterministic.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .evaluation import (EvalReport, LabeledScores, SENSITIVITY_TARGETS,
                         auroc, make_folds, sensitivity_threshold, summarize_folds)
from .features import (FeatureMatrix, ManifestEntry, dedup_oe, read_features)
from .models import TrainConfig, TrainedModel, train
from .scoring import (KnnConfig, ScoreTable, aggregate_slide, knn_score_batch,
                      model_score_batch, tta_score)
from .tiler import PatchCoord


def concat_features(mats: list[FeatureMatrix]) -> FeatureMatrix:
    if not mats:
        raise ValueError("no feature matrices to concatenate")
    rows = np.vstack([m.rows for m in mats])
    meta = [r for m in mats for r in m.meta]
    return FeatureMatrix(rows=rows, meta=meta)


def load_pool(entries: list[ManifestEntry], tissue_class: str) -> FeatureMatrix:
    mats = [read_features(e.path) for e in entries if e.tissue_class == tissue_class]
    if not mats:
        raise ValueError(f"manifest has no {tissue_class!r} feature files")
    return concat_features(mats)


def train_from_manifest(entries: list[ManifestEntry], cfg: TrainConfig,
                        oe_filter=None, exclude_slides: set[str] | None = None,
                        ) -> TrainedModel:
    """Dedup the OE pools against the normals, then train."""
    exclude = exclude_slides or set()
    normal_entries = [e for e in entries
                      if e.tissue_class == "normal_target" and e.slide_id not in exclude]
    if not normal_entries:
        raise ValueError("no normal_target slides to train on")
    normal = concat_features([read_features(e.path) for e in normal_entries])
    near = far = None
    if cfg.objective in ("bce", "hsc", "deepsad"):
        near = load_pool(entries, "near_oe")
        far = load_pool(entries, "far_oe")
        if oe_filter is not None:
            near = dedup_oe(near, normal, oe_filter)
            far = dedup_oe(far, normal, oe_filter)
            if near.n == 0 or far.n == 0:
                raise ValueError("OE deduplication emptied a pool")
    return train(normal, near, far, cfg)


def score_features(m: FeatureMatrix, scorer, average_views: bool = True) -> ScoreTable:
    """Score each row and collapse duplicate (slide, x, y) rows by averaging.

    Duplicate keys are treated as augmented views of the same patch; their
    scores are averaged in row order (the test-time-augmentation
    contract). ``scorer`` maps an (N, D) array to N scores.
    """
    raw = np.asarray(scorer(m.rows), dtype=np.float64)
    order: dict[tuple, list[float]] = {}
    for meta, s in zip(m.meta, raw):
        order.setdefault((meta.slide_id, meta.x, meta.y), []).append(float(s))
    coords, scores = [], []
    for (slide_id, x, y), views in order.items():
        coords.append(PatchCoord(slide_id=slide_id, x=x, y=y))
        scores.append(tta_score(views) if average_views else views[0])
    return ScoreTable(coords=coords, scores=np.array(scores))


def model_scorer(model: TrainedModel):
    return lambda rows: model_score_batch(model, rows)


def knn_scorer(reference: FeatureMatrix, cfg: KnnConfig):
    return lambda rows: knn_score_batch(rows, reference, cfg)


def slide_scores(tables: list[ScoreTable], cfg: PipelineConfig) -> dict[str, float]:
    out = {}
    for t in tables:
        for sid in t.slide_ids():
            out[sid] = aggregate_slide(t.for_slide(sid), cfg.aggregation)
    return out


def _score_entries(entries: list[ManifestEntry], scorer, jobs: int) -> list[ScoreTable]:
    """Score one table per manifest entry, optionally across threads."""
    def one(entry):
        return score_features(read_features(entry.path), scorer)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, entries))
    return [one(e) for e in entries]


@dataclass
class CrossvalResult:
    report: EvalReport
    slide_scores: dict[str, float]  # pooled held-out normals + fold-averaged anomalies


def crossval(entries: list[ManifestEntry], cfg: PipelineConfig, seed: int,
             scorer_kind: str = "model", jobs: int = 1) -> CrossvalResult:
    """K-fold cross-validation over the normal slides.

    Held-out normal slides are scored by the model trained on the other
    folds; anomalous slides are scored by every fold's model. The report
    carries per-fold AUROCs (mean +- population std), per-group AUROCs,
    and sensitivity thresholds computed on the pooled held-out normal
    scores with anomaly scores averaged across folds.
    """
    normal_entries = [e for e in entries if e.tissue_class == "normal_target"]
    anom_entries = [e for e in entries if e.tissue_class == "eval"]
    if not normal_entries or not anom_entries:
        raise ValueError("crossval needs normal_target and eval slides in the manifest")
    plan = make_folds([e.slide_id for e in normal_entries], k=cfg.folds, seed=seed)

    fold_aurocs = []
    group_folds: dict[str, list[float]] = {}
    pooled_normal: dict[str, float] = {}
    anom_per_fold: dict[str, list[float]] = {e.slide_id: [] for e in anom_entries}
    groups = {e.slide_id: e.diagnosis_group for e in entries}

    for fold in range(plan.k):
        held = set(plan.fold_members(fold))
        held_entries = [e for e in normal_entries if e.slide_id in held]
        if scorer_kind == "model":
            train_cfg = TrainConfig(**{**vars(cfg.train), "seed": seed + fold})
            model = train_from_manifest(entries, train_cfg, cfg.oe_filter,
                                        exclude_slides=held)
            scorer = model_scorer(model)
        elif scorer_kind == "knn":
            ref_entries = [e for e in normal_entries if e.slide_id not in held]
            reference = concat_features([read_features(e.path) for e in ref_entries])
            scorer = knn_scorer(reference, cfg.knn)
        else:
            raise ValueError(f"unknown scorer {scorer_kind!r}")

        tables = _score_entries(held_entries + anom_entries, scorer, jobs)
        per_slide = slide_scores(tables, cfg)
        for e in held_entries:
            pooled_normal[e.slide_id] = per_slide[e.slide_id]
        for e in anom_entries:
            anom_per_fold[e.slide_id].append(per_slide[e.slide_id])

        fold_ids = [e.slide_id for e in held_entries] + [e.slide_id for e in anom_entries]
        fold_labels = (["normal"] * len(held_entries) + ["anomalous"] * len(anom_entries))
        fold_scores = np.array([per_slide[s] for s in fold_ids])
        data = LabeledScores(scores=fold_scores, labels=fold_labels,
                             groups=[groups.get(s, "") for s in fold_ids])
        fold_aurocs.append(auroc(data))
        from .evaluation import group_report
        for g, a in group_report(data).items():
            group_folds.setdefault(g, []).append(a)

    mean, std = summarize_folds(fold_aurocs)
    group_stats = {}
    for g, vals in sorted(group_folds.items()):
        gm, gs = summarize_folds(vals)
        group_stats[g] = {"mean": gm, "std": gs}

    anom_avg = {s: float(np.mean(v)) for s, v in anom_per_fold.items()}
    pooled_ids = list(pooled_normal) + list(anom_avg)
    pooled = LabeledScores(
        scores=np.array([pooled_normal.get(s, anom_avg.get(s)) for s in pooled_ids]),
        labels=["normal"] * len(pooled_normal) + ["anomalous"] * len(anom_avg))
    sensitivity = {}
    for target in SENSITIVITY_TARGETS:
        t, frac = sensitivity_threshold(pooled, target)
        sensitivity[f"{target:.2f}"] = {"threshold": t, "automatable_fraction": frac}

    report = EvalReport(fold_aurocs=fold_aurocs, auroc_mean=mean, auroc_std=std,
                        group_aurocs=group_stats, sensitivity=sensitivity,
                        folds=plan.k, seed=seed)
    all_scores = dict(pooled_normal)
    all_scores.update(anom_avg)
    return CrossvalResult(report=report, slide_scores=all_scores)
