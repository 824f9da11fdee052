"""Synthetic feature pools and toy rasters."""

import json

import numpy as np
import pytest

from histoanomaly.evaluation import patch_labels_from_annotations, read_annotations, write_annotations
from histoanomaly.synth import RasterLayout, SynthSpec, gen_features, gen_raster
from histoanomaly.tiler import TileSpec, detect_tissue, enumerate_patches


class TestGenFeatures:
    def test_pool_sizes_and_tags(self):
        spec = SynthSpec(dim=8, n_normal=50, n_anomalous=10, n_near_oe=20,
                         n_far_oe=20, seed=1)
        pools = gen_features(spec)
        assert pools["normal"].n == 50 and pools["normal"].dim == 8
        assert pools["anomalous"].n == 10
        assert all(m.tissue_class == "normal_target" for m in pools["normal"].meta)
        assert all(m.label == "anomalous" for m in pools["anomalous"].meta)
        assert all(m.tissue_class == "near_oe" for m in pools["near_oe"].meta)
        assert all(m.tissue_class == "far_oe" for m in pools["far_oe"].meta)

    def test_same_seed_bit_identical(self):
        spec = SynthSpec(dim=4, n_normal=30, n_anomalous=5, n_near_oe=5,
                         n_far_oe=5, seed=9)
        a = gen_features(spec)
        b = gen_features(spec)
        for name in a:
            assert np.array_equal(a[name].rows, b[name].rows)

    def test_sample_means_converge(self):
        spec = SynthSpec.with_separation(4.0, dim=6, n_normal=4000, n_anomalous=4000,
                                         n_near_oe=4000, n_far_oe=4000, seed=5)
        pools = gen_features(spec)
        bound = 4.0 * spec.sigma / np.sqrt(4000)
        assert np.all(np.abs(pools["normal"].rows.mean(axis=0) - spec.mean) < bound)
        assert np.all(np.abs(pools["anomalous"].rows.mean(axis=0)
                             - (spec.mean + spec.delta)) < bound)
        assert np.all(np.abs(pools["near_oe"].rows.mean(axis=0)
                             - (spec.mean + spec.delta / 2)) < bound)

    def test_separation_sets_delta_norm(self):
        spec = SynthSpec.with_separation(4.0, dim=16, seed=0)
        assert np.linalg.norm(spec.delta) == pytest.approx(4.0, rel=1e-12)

    def test_far_pool_is_far_even_at_zero_delta(self):
        spec = SynthSpec(dim=8, n_normal=200, n_anomalous=10, n_near_oe=10,
                         n_far_oe=200, seed=2)
        pools = gen_features(spec)
        far_mean = pools["far_oe"].rows.mean(axis=0)
        assert np.linalg.norm(far_mean - spec.mean) > 5.0

    def test_validation(self):
        with pytest.raises(ValueError):
            SynthSpec(n_normal=0)
        with pytest.raises(ValueError):
            SynthSpec(sigma=0.0)

    def test_json_spec(self):
        spec = SynthSpec.from_json(json.dumps(
            {"separation": 4.0, "dim": 16, "n_normal": 100, "n_anomalous": 10,
             "n_near_oe": 10, "n_far_oe": 10, "seed": 3}))
        assert np.linalg.norm(spec.delta) == pytest.approx(4.0)


class TestGenRaster:
    def test_single_tile_square(self):
        layout = RasterLayout(width=340, height=340, rectangles=[
            {"kind": "tissue", "x": 0, "y": 0, "w": 340, "h": 340}])
        raster, mask, regions = gen_raster(layout)
        coords = enumerate_patches(mask, TileSpec(), slide_id=raster.id)
        assert len(coords) == 1
        assert regions == []

    def test_detected_mask_matches_truth_on_interior(self):
        layout = RasterLayout(width=400, height=400, rectangles=[
            {"kind": "tissue", "x": 20, "y": 20, "w": 340, "h": 340}])
        raster, truth, _ = gen_raster(layout)
        detected = detect_tissue(raster)
        # interior pixels (1 away from the rectangle border) match exactly
        assert detected.bits[21:359, 21:359].all()
        assert not detected.bits[:19, :].any()

    def test_three_tile_strip_labels(self):
        layout = RasterLayout(width=1020, height=340, rectangles=[
            {"kind": "tissue", "x": 0, "y": 0, "w": 1020, "h": 340},
            {"kind": "anomaly", "x": 340, "y": 0, "w": 340, "h": 340}])
        raster, mask, regions = gen_raster(layout)
        coords = enumerate_patches(mask, TileSpec(), slide_id=raster.id)
        assert len(coords) == 3
        out = patch_labels_from_annotations(coords, regions, 340)
        assert out.labels == ["normal", "anomalous", "normal"]

    def test_annotation_json_roundtrip(self, tmp_path):
        layout = RasterLayout(width=900, height=400, rectangles=[
            {"kind": "tissue", "x": 0, "y": 0, "w": 900, "h": 400},
            {"kind": "anomaly", "x": 10, "y": 10, "w": 50, "h": 50},
            {"kind": "anomaly", "x": 100, "y": 10, "w": 50, "h": 50},
            {"kind": "anomaly", "x": 200, "y": 10, "w": 50, "h": 50}])
        _, _, regions = gen_raster(layout)
        path = tmp_path / "ann.json"
        write_annotations(regions, path)
        back = read_annotations(path)
        assert len(back) == 3
        assert all(r.kind == "diagnosis_defining" for r in back)
        for a, b in zip(regions, back):
            assert np.array_equal(a.polygon, b.polygon)

    def test_overlapping_anomalies_rejected(self):
        layout = RasterLayout(width=200, height=200, rectangles=[
            {"kind": "anomaly", "x": 0, "y": 0, "w": 100, "h": 100},
            {"kind": "anomaly", "x": 50, "y": 50, "w": 100, "h": 100}])
        with pytest.raises(ValueError):
            gen_raster(layout)

    def test_rect_outside_canvas_rejected(self):
        layout = RasterLayout(width=100, height=100, rectangles=[
            {"kind": "tissue", "x": 50, "y": 0, "w": 100, "h": 50}])
        with pytest.raises(ValueError):
            gen_raster(layout)

    def test_polygons_simple_and_closed(self):
        layout = RasterLayout(width=300, height=300, rectangles=[
            {"kind": "anomaly", "x": 5, "y": 5, "w": 20, "h": 30},
            {"kind": "artifact", "x": 50, "y": 50, "w": 10, "h": 10}])
        _, _, regions = gen_raster(layout)
        for r in regions:
            assert r.polygon.shape == (4, 2)  # validated non-degenerate on build
