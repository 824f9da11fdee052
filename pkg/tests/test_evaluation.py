"""AUROC, folds, sensitivity thresholds, polygon labels."""

import numpy as np
import pytest

from histoanomaly.evaluation import (AnnotationRegion, LabeledScores,
                                     SingleClassError, auroc, group_report,
                                     make_folds, patch_labels_from_annotations,
                                     point_in_polygon, read_annotations,
                                     sensitivity_threshold, summarize_folds,
                                     write_annotations)
from histoanomaly.tiler import PatchCoord


def labeled(scores, labels, groups=None):
    return LabeledScores(scores=np.array(scores, dtype=np.float64),
                         labels=list(labels), groups=groups)


def auroc_pairwise_oracle(scores, labels):
    """O(n^2) pair counting: wins + half-ties over all (anom, norm) pairs."""
    anom = [s for s, l in zip(scores, labels) if l == "anomalous"]
    norm = [s for s, l in zip(scores, labels) if l == "normal"]
    total = 0.0
    for a in anom:
        for n in norm:
            if a > n:
                total += 1.0
            elif a == n:
                total += 0.5
    return total / (len(anom) * len(norm))


class TestAuroc:
    def test_perfect_separation(self):
        data = labeled([0, 0, 1, 1], ["normal", "normal", "anomalous", "anomalous"])
        assert auroc(data) == 1.0

    def test_all_ties_give_half(self):
        data = labeled([0.3] * 6, ["normal", "anomalous"] * 3)
        assert auroc(data) == 0.5

    def test_worked_example_with_tie(self):
        data = labeled([0.1, 0.4, 0.4, 0.8], ["normal", "normal", "anomalous", "anomalous"])
        assert auroc(data) == pytest.approx(0.875, abs=0.0)

    def test_matches_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            n = int(rng.integers(2, 120))
            scores = rng.integers(0, 12, n) / 10.0  # force plenty of ties
            labels = ["anomalous" if v else "normal" for v in rng.integers(0, 2, n)]
            if len(set(labels)) < 2:
                continue
            data = labeled(scores, labels)
            assert auroc(data) == auroc_pairwise_oracle(list(scores), labels)

    def test_complement_identity(self):
        rng = np.random.default_rng(37)
        scores = rng.random(60)
        labels = ["anomalous" if v else "normal" for v in rng.integers(0, 2, 60)]
        if len(set(labels)) < 2:
            labels[0] = "normal"; labels[1] = "anomalous"
        a = auroc(labeled(scores, labels))
        b = auroc(labeled(-scores, labels))
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(41)
        scores = rng.random(50)
        labels = ["anomalous" if v else "normal" for v in rng.integers(0, 2, 50)]
        if len(set(labels)) < 2:
            labels[0] = "normal"; labels[1] = "anomalous"
        a = auroc(labeled(scores, labels))
        b = auroc(labeled(np.exp(3.0 * scores), labels))
        assert a == pytest.approx(b, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassError):
            auroc(labeled([0.1, 0.2], ["normal", "normal"]))


class TestMakeFolds:
    def test_even_split(self):
        plan = make_folds([f"s{i}" for i in range(10)], k=5, seed=1)
        sizes = [len(plan.fold_members(f)) for f in range(5)]
        assert sizes == [2] * 5

    def test_uneven_split_differs_by_at_most_one(self):
        plan = make_folds([f"s{i}" for i in range(11)], k=5, seed=1)
        sizes = sorted(len(plan.fold_members(f)) for f in range(5))
        assert sizes == [2, 2, 2, 2, 3]

    def test_same_seed_same_plan(self):
        ids = [f"s{i}" for i in range(23)]
        assert make_folds(ids, 5, 7).assignments == make_folds(ids, 5, 7).assignments

    def test_partition_property(self):
        ids = [f"s{i}" for i in range(17)]
        plan = make_folds(ids, 5, 3)
        members = [s for f in range(5) for s in plan.fold_members(f)]
        assert sorted(members) == sorted(ids)

    def test_too_few_slides(self):
        with pytest.raises(ValueError):
            make_folds(["a", "b"], k=5, seed=0)


def threshold_oracle(scores, labels, target):
    """Enumerate candidate thresholds; pick the largest feasible one."""
    anom = sorted((s for s, l in zip(scores, labels) if l == "anomalous"), reverse=True)
    norm = [s for s, l in zip(scores, labels) if l == "normal"]
    best = None
    for t in sorted(set(anom), reverse=True):
        detected = sum(1 for a in anom if a >= t)
        if detected / len(anom) >= target - 1e-12:
            best = t
            break
    frac = sum(1 for n in norm if n < best) / len(norm) if norm else 0.0
    return best, frac


class TestSensitivityThreshold:
    def test_perfect_separation_full_automation(self):
        data = labeled([0.1, 0.2, 0.3, 0.8, 0.9],
                       ["normal"] * 3 + ["anomalous"] * 2)
        t, frac = sensitivity_threshold(data, 1.0)
        assert frac == 1.0
        assert t == 0.8

    def test_worked_example(self):
        data = labeled([0.9, 0.8, 0.1, 0.5, 0.85],
                       ["anomalous", "anomalous", "normal", "normal", "normal"])
        t, frac = sensitivity_threshold(data, 1.0)
        assert t == 0.8
        assert frac == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_half_target_example(self):
        data = labeled([0.9, 0.2, 0.1], ["anomalous", "anomalous", "normal"])
        t, frac = sensitivity_threshold(data, 0.5)
        assert t == 0.9 and frac == 1.0

    def test_achieved_sensitivity_meets_target(self):
        rng = np.random.default_rng(43)
        for _ in range(100):
            n_a, n_n = int(rng.integers(1, 30)), int(rng.integers(1, 30))
            scores = np.concatenate([rng.random(n_a) + 0.2, rng.random(n_n)])
            labels = ["anomalous"] * n_a + ["normal"] * n_n
            for target in (0.95, 0.99, 1.0):
                t, _ = sensitivity_threshold(labeled(scores, labels), target)
                achieved = np.mean(scores[:n_a] >= t)
                assert achieved >= target - 1e-12

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(47)
        for _ in range(100):
            n_a, n_n = int(rng.integers(1, 25)), int(rng.integers(1, 25))
            scores = list(rng.integers(0, 10, n_a + n_n) / 10.0)
            labels = ["anomalous"] * n_a + ["normal"] * n_n
            for target in (0.5, 0.95, 1.0):
                got = sensitivity_threshold(labeled(scores, labels), target)
                assert got == threshold_oracle(scores, labels, target)

    def test_fraction_monotone_in_target(self):
        rng = np.random.default_rng(53)
        scores = np.concatenate([rng.normal(1, 1, 40), rng.normal(0, 1, 60)])
        labels = ["anomalous"] * 40 + ["normal"] * 60
        data = labeled(scores, labels)
        fracs = [sensitivity_threshold(data, t)[1] for t in (0.95, 0.99, 1.00)]
        assert fracs[0] >= fracs[1] >= fracs[2]

    def test_target_one_sensitivity_exact(self):
        rng = np.random.default_rng(59)
        scores = rng.random(30)
        labels = ["anomalous" if v else "normal" for v in rng.integers(0, 2, 30)]
        if "anomalous" not in labels:
            labels[0] = "anomalous"
        data = labeled(scores, labels)
        t, _ = sensitivity_threshold(data, 1.0)
        anom = [s for s, l in zip(scores, labels) if l == "anomalous"]
        assert all(a >= t for a in anom)

    def test_needs_both_classes(self):
        with pytest.raises(ValueError):
            sensitivity_threshold(labeled([0.5], ["normal"]), 1.0)
        with pytest.raises(ValueError):
            sensitivity_threshold(labeled([0.5], ["anomalous"]), 1.0)


class TestGroupReport:
    def test_single_group_equals_overall(self):
        data = labeled([0.1, 0.9, 0.3, 0.8], ["normal", "anomalous"] * 2,
                       groups=["", "g", "", "g"])
        report = group_report(data)
        assert report == {"g": auroc(data)}

    def test_group_outscoring_all_normals(self):
        data = labeled([0.1, 0.2, 0.9, 0.95, 0.05],
                       ["normal", "normal", "anomalous", "anomalous", "anomalous"],
                       groups=["", "", "high", "high", "low"])
        report = group_report(data)
        assert report["high"] == 1.0
        assert report["low"] == 0.0

    def test_two_groups_match_pairwise_oracle(self):
        scores = [0.2, 0.4, 0.7, 0.5, 0.3, 0.9]
        labels = ["normal", "normal", "anomalous", "anomalous", "anomalous", "anomalous"]
        groups = ["", "", "a", "a", "b", "b"]
        report = group_report(labeled(scores, labels, groups))
        for g in ("a", "b"):
            sub_scores = [s for s, l, gr in zip(scores, labels, groups)
                          if l == "normal" or gr == g]
            sub_labels = [l for l, gr in zip(labels, groups) if l == "normal" or gr == g]
            assert report[g] == auroc_pairwise_oracle(sub_scores, sub_labels)

    def test_group_without_anomalies_skipped_with_warning(self):
        data = labeled([0.1, 0.9, 0.2], ["normal", "anomalous", "normal"],
                       groups=["benign", "g", "benign"])
        with pytest.warns(UserWarning, match="benign"):
            report = group_report(data)
        assert set(report) == {"g"}


class TestPolygons:
    SQUARE = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])

    def test_inside_outside(self):
        assert point_in_polygon(5, 5, self.SQUARE)
        assert not point_in_polygon(15, 5, self.SQUARE)

    def test_on_edge_is_inside(self):
        assert point_in_polygon(10.0, 5.0, self.SQUARE)
        assert point_in_polygon(0.0, 0.0, self.SQUARE)

    def test_concave_even_odd(self):
        # C-shape: the notch is outside
        poly = np.array([[0, 0], [10, 0], [10, 3], [4, 3], [4, 7], [10, 7],
                         [10, 10], [0, 10]], dtype=float)
        assert point_in_polygon(2, 5, poly)
        assert not point_in_polygon(7, 5, poly)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            AnnotationRegion(kind="artifact", polygon=np.array([[0, 0], [1, 1]]))
        with pytest.raises(ValueError):
            AnnotationRegion(kind="artifact",
                             polygon=np.array([[0, 0], [1, 1], [2, 2]]))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            AnnotationRegion(kind="mystery", polygon=self.SQUARE)

    def test_json_roundtrip(self, tmp_path):
        regions = [AnnotationRegion(kind="diagnosis_defining", polygon=self.SQUARE),
                   AnnotationRegion(kind="artifact", polygon=self.SQUARE + 20.0)]
        path = tmp_path / "annotations.json"
        write_annotations(regions, path)
        back = read_annotations(path)
        assert len(back) == 2
        assert back[0].kind == "diagnosis_defining"
        assert np.array_equal(back[1].polygon, regions[1].polygon)


class TestPatchLabels:
    def region(self, kind, x0, y0, x1, y1):
        return AnnotationRegion(kind=kind, polygon=np.array(
            [[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))

    def test_center_in_diagnosis_region(self):
        regions = [self.region("diagnosis_defining", 0, 0, 100, 100)]
        out = patch_labels_from_annotations([PatchCoord("s", 20, 20)], regions, 40)
        assert out.labels == ["anomalous"]

    def test_outside_all_regions_is_normal(self):
        regions = [self.region("diagnosis_defining", 200, 200, 300, 300)]
        out = patch_labels_from_annotations([PatchCoord("s", 0, 0)], regions, 40)
        assert out.labels == ["normal"]

    def test_other_anomalous_excluded(self):
        regions = [self.region("other_anomalous", 0, 0, 100, 100)]
        out = patch_labels_from_annotations([PatchCoord("s", 20, 20)], regions, 40)
        assert out.labels == ["excluded"]

    def test_diagnosis_wins_over_other(self):
        regions = [self.region("other_anomalous", 0, 0, 100, 100),
                   self.region("diagnosis_defining", 0, 0, 100, 100)]
        out = patch_labels_from_annotations([PatchCoord("s", 20, 20)], regions, 40)
        assert out.labels == ["anomalous"]

    def test_center_on_edge_counts_inside(self):
        # patch 40 at x=80: center x = 100 exactly on the region edge
        regions = [self.region("diagnosis_defining", 0, 0, 100, 100)]
        out = patch_labels_from_annotations([PatchCoord("s", 80, 30)], regions, 40)
        assert out.labels == ["anomalous"]

    def test_artifact_stream_separate(self):
        regions = [self.region("artifact", 0, 0, 100, 100)]
        out = patch_labels_from_annotations([PatchCoord("s", 20, 20),
                                             PatchCoord("s", 200, 200)], regions, 40)
        assert out.labels == ["normal", "normal"]
        assert out.in_artifact == [True, False]


def test_summarize_folds_population_std():
    vals = [0.9, 0.92, 0.94, 0.96, 0.98]
    mean, std = summarize_folds(vals)
    assert mean == pytest.approx(0.94, abs=1e-12)
    assert std == pytest.approx(np.std(vals), abs=1e-15)  # ddof = 0
