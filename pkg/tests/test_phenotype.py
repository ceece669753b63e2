"""Region features, well scoring with abstention, and the CV harness."""

import itertools

import numpy as np
import pytest

from wormscreen.boosting import ABSTAIN, BaggedEnsemble, Stump, StumpEnsemble
from wormscreen.fluor import Blob
from wormscreen.imagecore import GrayImage, Region, connected_components
from wormscreen.phenotype import (
    REGION_FEATURE_NAMES,
    ProcessedWell,
    WellRecord,
    classify_well,
    cross_validate,
    intensity_histogram_diagnostic,
    read_manifest,
    region_features,
    train_plate_classifier,
    write_manifest,
)


def make_region(mask):
    (r,) = connected_components(mask)
    return r


def make_blob(ys, xs, contrast=0.3):
    ys = np.asarray(ys)
    xs = np.asarray(xs)
    return Blob(label=1, ys=ys, xs=xs, area=len(ys),
                centroid=(float(xs.mean()), float(ys.mean())),
                bbox=(int(xs.min()), int(ys.min()), int(xs.max()),
                      int(ys.max())),
                elongation=2.0, orientation=0.0, mean=0.5, max=0.8,
                q10=0.3, q50=0.5, q90=0.7, boundary_contrast=contrast,
                contrast_ratio=1.0 + contrast, worm_overlap=1.0,
                worm_alignment=1.0)


def constant_member(value):
    """One-stump ensemble whose score is `value` for any region vector."""
    return StumpEnsemble(
        stumps=[Stump(0, 1e12, c_left=value, c_right=0.0)],
        dimensionality=len(REGION_FEATURE_NAMES))


def make_well(n_regions, label="WT", well_id="A01", feature_value=1.0):
    rng = np.random.default_rng(0)
    feats = np.full((n_regions, len(REGION_FEATURE_NAMES)), feature_value)
    feats += 0.01 * rng.random(feats.shape)
    return ProcessedWell(
        record=WellRecord("p", well_id, "b", "f", "control", label),
        features=feats)


class TestRegionFeatures:
    def test_no_stripes_zero_fields(self):
        mask = np.zeros((30, 30), bool)
        mask[5:20, 5:20] = True
        region = make_region(mask)
        fl = GrayImage(np.random.default_rng(1).random((30, 30)))
        f = region_features(region, [], fl)
        assert f.stripe_area_ratio == 0.0
        assert f.stripe_count == 0.0
        assert f.stripe_q50 == 0.0 and f.stripe_q90 == 0.0
        assert f.stripe_boundary_contrast == 0.0
        assert f.region_area == 225.0

    def test_stripe_covering_region_ratio_one(self):
        mask = np.zeros((20, 20), bool)
        mask[4:12, 4:12] = True
        region = make_region(mask)
        ys, xs = np.nonzero(mask)
        blob = make_blob(ys, xs)
        fl = GrayImage(np.full((20, 20), 0.6))
        f = region_features(region, [blob], fl)
        assert f.stripe_area_ratio == 1.0
        # constant image: stripe q50 equals the region body level
        assert f.stripe_q50 == pytest.approx(1.0)

    def test_ratio_matches_set_intersection_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            mask = rng.random((25, 25)) < 0.3
            mask[10:15, 10:15] = True  # keep one solid region
            regions = connected_components(mask)
            region = max(regions, key=lambda r: r.area)
            sy, sx = np.nonzero(rng.random((25, 25)) < 0.2)
            blob = make_blob(sy, sx) if len(sy) else None
            fl = GrayImage(rng.random((25, 25)))
            stripes = [blob] if blob else []
            f = region_features(region, stripes, fl)
            region_set = set(zip(region.ys.tolist(), region.xs.tolist()))
            blob_set = set(zip(sy.tolist(), sx.tolist()))
            inter = len(region_set & blob_set)
            assert f.stripe_total_area == inter
            assert f.stripe_area_ratio == pytest.approx(
                min(1.0, inter / region.area))


class TestClassifyWell:
    def test_all_members_positive(self):
        bag = BaggedEnsemble([constant_member(+0.5)] * 7, 1.0)
        ws = classify_well(bag, make_well(3))
        assert ws.decision == +1
        assert ws.total == pytest.approx(1.5)

    def test_six_one_disagreement_abstains(self):
        bag = BaggedEnsemble([constant_member(+0.5)] * 6
                             + [constant_member(-0.1)], 1.0)
        ws = classify_well(bag, make_well(2))
        assert ws.decision == ABSTAIN
        assert ws.reason == "member disagreement"

    def test_zero_total_abstains(self):
        bag = BaggedEnsemble([constant_member(+0.5)] * 6
                             + [constant_member(0.0)], 1.0)
        ws = classify_well(bag, make_well(4))
        assert ws.decision == ABSTAIN

    def test_no_regions_abstains_with_reason(self):
        bag = BaggedEnsemble([constant_member(+0.5)] * 7, 1.0)
        well = ProcessedWell(
            record=WellRecord("p", "B02", "b", "f", "control", "WT"),
            features=np.zeros((0, len(REGION_FEATURE_NAMES))))
        ws = classify_well(bag, well)
        assert ws.decision == ABSTAIN
        assert ws.reason == "no worms detected"

    def test_region_order_invariant(self):
        rng = np.random.default_rng(3)
        feats = rng.random((6, len(REGION_FEATURE_NAMES)))
        bag = BaggedEnsemble(
            [StumpEnsemble([Stump(i % 3, 0.5, -0.4, 0.7)],
                           len(REGION_FEATURE_NAMES)) for i in range(5)], 1.0)
        rec = WellRecord("p", "C03", "b", "f", "control", "WT")
        w1 = ProcessedWell(rec, feats)
        w2 = ProcessedWell(rec, feats[::-1].copy())
        assert classify_well(bag, w1).decision == \
            classify_well(bag, w2).decision


class TestVotePatterns:
    def test_all_128_patterns(self):
        # unanimity rule over every possible 7-member sign pattern
        for pattern in itertools.product((+1, -1), repeat=7):
            members = [constant_member(0.5 * v) for v in pattern]
            bag = BaggedEnsemble(members, 1.0)
            ws = classify_well(bag, make_well(1))
            if len(set(pattern)) == 1:
                assert ws.decision == pattern[0]
            else:
                assert ws.decision == ABSTAIN


class TestTrainPlateClassifier:
    @staticmethod
    def _wells(n_per_class=6, sep=2.0):
        rng = np.random.default_rng(4)
        wells = []
        for i in range(n_per_class):
            for label, shift in (("WT", 0.0), ("hNR", sep)):
                feats = rng.random((5, len(REGION_FEATURE_NAMES)))
                feats[:, 4] += shift  # stripe_area_ratio column
                wells.append(ProcessedWell(
                    record=WellRecord("p", f"W{i}{label}", "b", "f",
                                      "control", label),
                    features=feats))
        return wells

    def test_separable_plate_zero_training_error(self):
        wells = self._wells()
        bag = train_plate_classifier(wells, ("WT", "hNR"), K=7, rounds=10,
                                     seed=0)
        for member in bag.members:
            assert member.meta.round_errors[0] == 0.0
        for well in wells:
            ws = classify_well(bag, well)
            expected = +1 if well.record.known_label == "hNR" else -1
            assert ws.decision == expected

    def test_missing_class_named_in_error(self):
        wells = [w for w in self._wells() if w.record.known_label == "WT"]
        with pytest.raises(ValueError, match="hNR"):
            train_plate_classifier(wells, ("WT", "hNR"))

    def test_deterministic(self):
        wells = self._wells()
        b1 = train_plate_classifier(wells, ("WT", "hNR"), seed=9, rounds=5)
        b2 = train_plate_classifier(wells, ("WT", "hNR"), seed=9, rounds=5)
        for m1, m2 in zip(b1.members, b2.members):
            assert [(s.feature_index, s.threshold) for s in m1.stumps] == \
                   [(s.feature_index, s.threshold) for s in m2.stumps]


class TestCrossValidate:
    @staticmethod
    def _plate(n_per_class=10, sep=3.0, seed=5):
        rng = np.random.default_rng(seed)
        wells = []
        for i in range(n_per_class):
            for label, shift in (("WT", 0.0), ("lNR", sep)):
                feats = rng.random((4, len(REGION_FEATURE_NAMES)))
                feats[:, 4] += shift
                wells.append(ProcessedWell(
                    record=WellRecord("p", f"{label}{i}", "b", "f",
                                      "control", label),
                    features=feats))
        return wells

    def test_separable_plate_zero_error(self):
        report = cross_validate(self._plate(), ("WT", "lNR"), replicates=3,
                                seed=0, rounds=10)
        assert report.error_without_abstention_pct == 0.0
        assert report.error_with_abstention_pct == 0.0
        assert report.abstention_pct == 0.0

    def test_error_arithmetic(self):
        # 48 test wells, 2 wrong -> 4.1666..% per the error definition
        assert 2 / 48 * 100 == pytest.approx(4.1667, abs=1e-3)

    def test_k1_no_abstention_and_columns_coincide(self):
        report = cross_validate(self._plate(sep=0.35), ("WT", "lNR"),
                                replicates=3, seed=1, K=1, rounds=8)
        assert report.abstention_pct == 0.0
        assert report.error_with_abstention_pct == pytest.approx(
            report.error_without_abstention_pct)

    def test_error_with_abstention_not_higher(self):
        report = cross_validate(self._plate(sep=0.5, seed=7), ("WT", "lNR"),
                                replicates=4, seed=2, rounds=12)
        assert report.error_with_abstention_pct <= \
            report.error_without_abstention_pct + 1e-9

    def test_too_few_wells_rejected(self):
        wells = self._plate(n_per_class=1)
        with pytest.raises(ValueError):
            cross_validate(wells, ("WT", "lNR"))

    def test_report_serialization(self):
        report = cross_validate(self._plate(), ("WT", "lNR"), replicates=2,
                                seed=3, rounds=5)
        text = report.to_text()
        assert "WT vs lNR" in text
        import json
        d = json.loads(report.to_json())
        assert d["task"] == ["WT", "lNR"]
        assert len(d["per_replicate"]) == 2


class TestDiagnostic:
    def test_identical_classes_identical_histograms(self):
        wells = []
        for i in range(8):
            for label in ("WT", "hNR"):
                wells.append(ProcessedWell(
                    record=WellRecord("p", f"{label}{i}", "b", "f",
                                      "control", label),
                    features=np.zeros((1, len(REGION_FEATURE_NAMES))),
                    mean_fl_in_regions=0.1 * (i % 4),
                    stripe_area_ratio=0.3))
        rep = intensity_histogram_diagnostic(wells, ("WT", "hNR"))
        assert rep.intensity_hist["WT"] == rep.intensity_hist["hNR"]
        assert rep.intensity_ks == pytest.approx(0.0)

    def test_histogram_mass_equals_well_count(self):
        rng = np.random.default_rng(6)
        wells = [ProcessedWell(
            record=WellRecord("p", f"w{i}", "b", "f", "control",
                              "WT" if i % 2 else "hNR"),
            features=np.zeros((1, len(REGION_FEATURE_NAMES))),
            mean_fl_in_regions=float(rng.random()),
            stripe_area_ratio=float(rng.random())) for i in range(20)]
        rep = intensity_histogram_diagnostic(wells, ("WT", "hNR"))
        assert sum(rep.intensity_hist["WT"]) == 10
        assert sum(rep.intensity_hist["hNR"]) == 10


class TestManifest:
    def test_round_trip(self, tmp_path):
        records = [
            WellRecord("p1", "A01", "a_bf.pgm", "a_fl.pgm", "control", "WT"),
            WellRecord("p1", "A02", "b_bf.pgm", "b_fl.pgm", "test", None),
            WellRecord("p1", "A03", "c_bf.pgm", "c_fl.pgm", "test", "hNR"),
        ]
        path = tmp_path / "manifest.csv"
        write_manifest(path, records)
        loaded = read_manifest(path)
        assert loaded == records

    def test_control_requires_label(self):
        with pytest.raises(ValueError):
            WellRecord("p", "A01", "b", "f", "control", None)

    def test_unknown_phenotype_rejected(self):
        with pytest.raises(ValueError):
            WellRecord("p", "A01", "b", "f", "test", "XYZ")
