"""Command-line pipeline driver.

Subcommands wire the library into the full workflow: tile slides,
compute a stain target, train a scoring head, score feature files,
aggregate patch scores, render heatmaps, evaluate labeled scores, run
cross-validation, and generate synthetic data. A single JSON config file
(--config, or $HISTOANOMALY_CONFIG) supplies defaults; explicit flags
win. Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import pipeline, synth
from .config import PipelineConfig, load_config
from .evaluation import (LabeledScores, SENSITIVITY_TARGETS, SingleClassError,
                         auroc, group_report, sensitivity_threshold,
                         write_annotations)
from .features import (FeatureFileError, FeatureMatrix, ManifestEntry, PatchMeta,
                       read_features, read_manifest, write_features, write_manifest)
from .models import (TrainConfig, TrainingDivergedError, load_checkpoint,
                     save_checkpoint)
from .scoring import (HeatmapCanvas, aggregate_slide, heatmap_accumulate,
                      heatmap_render, read_score_csv, write_heatmap_png,
                      write_score_csv)
from .stainnorm import compute_stats, pooled_stats
from .tiler import (detect_tissue, enumerate_patches, read_raster,
                    write_mask_png, write_patch_csv)

EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _fail(message: str, code: int = EXIT_INPUT):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="pipeline config JSON (default: $HISTOANOMALY_CONFIG)")
@click.pass_context
def main(ctx, config_path):
    """Histopathology anomaly detection over patch embeddings."""
    try:
        ctx.obj = load_config(config_path)
    except (OSError, ValueError, KeyError) as exc:
        _fail(f"cannot load config: {exc}")


@main.command()
@click.argument("slides", nargs=-1, required=True, type=click.Path())
@click.option("--out-dir", type=click.Path(), default=".", show_default=True)
@click.option("--heatmap-grid", is_flag=True,
              help="use the overlapping heatmap stride instead of the training stride")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="slides processed in parallel; output order stays fixed")
@click.pass_obj
def tile(cfg: PipelineConfig, slides, out_dir, heatmap_grid, jobs):
    """Detect tissue and enumerate patches; writes mask PNGs and a patch CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.heatmap_tile if heatmap_grid else cfg.tile
    for slide_path in slides:
        if not os.path.exists(slide_path):
            _fail(f"no such slide file: {slide_path}")

    def one(slide_path):
        raster = read_raster(slide_path)
        mask = detect_tissue(raster, cfg.tissue)
        return raster.id, mask, enumerate_patches(mask, spec, slide_id=raster.id)

    try:
        if jobs > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(one, slides))
        else:
            results = [one(s) for s in slides]
    except (OSError, ValueError) as exc:
        _fail(f"cannot process slides: {exc}")
    all_coords = []
    for slide_id, mask, coords in results:
        if not coords:
            click.echo(f"warning: {slide_id}: no tissue patches found", err=True)
        write_mask_png(mask, out / f"{slide_id}_mask.png")
        all_coords.extend(coords)
        click.echo(f"{slide_id}: {len(coords)} patches")
    write_patch_csv(all_coords, out / "patches.csv")


@main.command("stain-target")
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def stain_target(cfg: PipelineConfig, manifest, out):
    """Pool per-slide stain statistics from raster paths into a target."""
    entries = read_manifest(manifest)
    stats = []
    for e in entries:
        raster = read_raster(e.path, slide_id=e.slide_id)
        mask = detect_tissue(raster, cfg.tissue)
        stats.append(compute_stats(raster.pixels, mask.bits))
    target = pooled_stats(stats)
    Path(out).write_text(target.to_json() + "\n")
    click.echo(f"stain target written to {out}")


def _train_config(cfg: PipelineConfig, objective, seed, steps) -> TrainConfig:
    overrides = {}
    if steps is not None:
        overrides["steps"] = steps
    base = (TrainConfig.defaults_for(objective, **overrides)
            if objective != cfg.train.objective
            else TrainConfig(**{**vars(cfg.train), **overrides}))
    return TrainConfig(**{**vars(base), "seed": seed})


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--objective", default=None,
              help="bce | hsc | deepsad | compactness | autoencoder")
@click.option("--seed", type=int, required=True)
@click.option("--steps", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def train(cfg: PipelineConfig, manifest, objective, seed, steps, out):
    """Train a scoring head on manifest feature files; writes a checkpoint."""
    objective = objective or cfg.train.objective
    try:
        train_cfg = _train_config(cfg, objective, seed, steps)
    except ValueError as exc:
        _fail(str(exc))
    entries = read_manifest(manifest)
    try:
        model = pipeline.train_from_manifest(entries, train_cfg, cfg.oe_filter)
    except TrainingDivergedError as exc:
        _fail(str(exc), EXIT_NUMERIC)
    except (FeatureFileError, ValueError, OSError) as exc:
        _fail(str(exc))
    save_checkpoint(model, out)
    trace_path = Path(out).with_suffix(".loss.csv")
    with open(trace_path, "w") as f:
        f.write("step,loss\n")
        for i, l in enumerate(model.loss_trace):
            f.write(f"{i},{l:.9g}\n")
    click.echo(f"checkpoint written to {out} (final loss "
               f"{model.loss_trace[-1] if model.loss_trace else float('nan'):.6g})")


@main.command()
@click.argument("features_path", type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="score with a trained head")
@click.option("--reference", type=click.Path(exists=True), default=None,
              help="score with kNN against this reference feature file")
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def score(cfg: PipelineConfig, features_path, checkpoint, reference, out):
    """Score each patch; duplicate (slide,x,y) rows average as TTA views."""
    if (checkpoint is None) == (reference is None):
        _fail("provide exactly one of --checkpoint or --reference")
    try:
        feats = read_features(features_path)
        if checkpoint is not None:
            model = load_checkpoint(checkpoint)
            scorer = pipeline.model_scorer(model)
        else:
            ref = read_features(reference)
            scorer = pipeline.knn_scorer(ref, cfg.knn)
        table = pipeline.score_features(feats, scorer)
    except (FeatureFileError, ValueError, OSError) as exc:
        _fail(str(exc))
    write_score_csv(table, out)
    click.echo(f"{table.scores.shape[0]} patch scores written to {out}")


@main.command()
@click.argument("scores_csv", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), required=True)
@click.pass_obj
def aggregate(cfg: PipelineConfig, scores_csv, out):
    """Aggregate patch scores to slide scores (top-fraction mean)."""
    try:
        table = read_score_csv(scores_csv)
        rows = [(sid, aggregate_slide(table.for_slide(sid), cfg.aggregation))
                for sid in table.slide_ids()]
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    with open(out, "w") as f:
        f.write("slide_id,score\n")
        for sid, s in rows:
            f.write(f"{sid},{s:.9g}\n")
    click.echo(f"{len(rows)} slide scores written to {out}")


@main.command()
@click.argument("scores_csv", type=click.Path(exists=True))
@click.option("--width", type=int, required=True)
@click.option("--height", type=int, required=True)
@click.option("--out-png", type=click.Path(), required=True)
@click.option("--out-grid", type=click.Path(), default=None,
              help="raw averaged grid as a feature file (D=1, covered pixels)")
@click.option("--colormap", default="blue_red", show_default=True)
@click.pass_obj
def heatmap(cfg: PipelineConfig, scores_csv, width, height, out_png, out_grid, colormap):
    """Average overlapping patch scores into a heatmap PNG (+ raw grid)."""
    try:
        table = read_score_csv(scores_csv)
        canvas = HeatmapCanvas.blank(width, height, colormap)
        for coord, s in zip(table.coords, table.scores):
            heatmap_accumulate(canvas, coord, float(s), cfg.tile.patch_size)
        rgba, grid = heatmap_render(canvas)
    except (ValueError, OSError) as exc:
        _fail(str(exc))
    write_heatmap_png(rgba, out_png)
    if out_grid:
        ys, xs = np.nonzero(~np.isnan(grid))
        slide_id = table.coords[0].slide_id if table.coords else "heatmap"
        rows = grid[ys, xs].astype(np.float32)[:, None]
        meta = [PatchMeta(slide_id=slide_id, x=int(x), y=int(y)) for x, y in zip(xs, ys)]
        write_features(FeatureMatrix(rows=rows, meta=meta), out_grid)
    click.echo(f"heatmap written to {out_png}")


@main.command("eval")
@click.argument("slide_scores_csv", type=click.Path(exists=True))
@click.argument("labels_csv", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="also write the report JSON")
def eval_cmd(slide_scores_csv, labels_csv, out):
    """AUROC and sensitivity thresholds from slide scores and labels.

    LABELS_CSV columns: slide_id,label[,diagnosis_group].
    """
    import csv
    labels = {}
    groups = {}
    with open(labels_csv, newline="") as f:
        for row in csv.DictReader(f):
            labels[row["slide_id"]] = row["label"]
            groups[row["slide_id"]] = row.get("diagnosis_group", "") or ""
    ids, scores = [], []
    with open(slide_scores_csv, newline="") as f:
        for row in csv.DictReader(f):
            ids.append(row["slide_id"])
            scores.append(float(row["score"]))
    missing = [s for s in ids if s not in labels]
    if missing:
        _fail(f"labels missing for slides: {', '.join(missing[:5])}")
    data = LabeledScores(scores=np.array(scores),
                         labels=[labels[s] for s in ids],
                         groups=[groups.get(s, "") for s in ids])
    try:
        overall = auroc(data)
    except SingleClassError:
        _fail("single-class input: need both normal and anomalous slides")
    result = {"auroc": overall,
              "groups": group_report(data) if any(data.groups) else {},
              "sensitivity": {}}
    for target in SENSITIVITY_TARGETS:
        t, frac = sensitivity_threshold(data, target)
        result["sensitivity"][f"{target:.2f}"] = {
            "threshold": t, "automatable_fraction": frac}
    click.echo(f"slide AUROC: {overall:.4f}")
    for g, a in result["groups"].items():
        click.echo(f"  group {g}: {a:.4f}")
    for t, entry in result["sensitivity"].items():
        click.echo(f"  sensitivity {t}: threshold {entry['threshold']:.6g}, "
                   f"automatable {entry['automatable_fraction']:.4f}")
    if out:
        Path(out).write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")


@main.command()
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--seed", type=int, required=True)
@click.option("--scorer", type=click.Choice(["model", "knn"]), default="model",
              show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="report JSON path")
@click.pass_obj
def crossval(cfg: PipelineConfig, manifest, seed, scorer, jobs, out):
    """K-fold cross-validation; emits the EvalReport as JSON and text."""
    entries = read_manifest(manifest)
    try:
        result = pipeline.crossval(entries, cfg, seed=seed, scorer_kind=scorer, jobs=jobs)
    except TrainingDivergedError as exc:
        _fail(str(exc), EXIT_NUMERIC)
    except (FeatureFileError, SingleClassError, ValueError, OSError) as exc:
        _fail(str(exc))
    Path(out).write_text(result.report.to_json() + "\n")
    click.echo(result.report.to_text())


@main.command("synth")
@click.argument("spec_json", type=click.Path(exists=True))
@click.option("--out-dir", type=click.Path(), required=True)
def synth_cmd(spec_json, out_dir):
    """Generate synthetic data from a JSON spec.

    The spec may hold a "features" section (Gaussian pools + manifest)
    and/or a "rasters" list (painted slides with annotation JSON).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(spec_json) as f:
        spec = json.load(f)
    if "features" not in spec and "rasters" not in spec:
        _fail("spec needs a 'features' section or a 'rasters' list")
    try:
        if "features" in spec:
            fs = synth.SynthSpec.from_json(json.dumps(spec["features"]))
            pools = synth.gen_features(fs)
            entries = []
            tissue_label = {"normal": ("normal_target", "normal"),
                            "anomalous": ("eval", "anomalous"),
                            "near_oe": ("near_oe", "unknown"),
                            "far_oe": ("far_oe", "unknown")}
            for name, pool in pools.items():
                path = out / f"{name}.hadf"
                write_features(pool, path)
                tc, lbl = tissue_label[name]
                entries.append(ManifestEntry(slide_id=name, path=str(path),
                                             tissue_class=tc, label=lbl))
            write_manifest(entries, out / "manifest.csv")
            click.echo(f"feature pools written to {out}")
        for layout_obj in spec.get("rasters", []):
            layout = synth.RasterLayout(**layout_obj)
            raster, mask, regions = synth.gen_raster(layout)
            from PIL import Image
            Image.fromarray(raster.pixels, mode="RGB").save(out / f"{raster.id}.png")
            write_mask_png(mask, out / f"{raster.id}_truth_mask.png")
            write_annotations(regions, out / f"{raster.id}_annotations.json")
            click.echo(f"raster {raster.id} written to {out}")
    except ValueError as exc:
        _fail(str(exc))


if __name__ == "__main__":
    main()
