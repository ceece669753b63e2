"""Dense scan vs. direct per-segment scoring, determinism, tie-breaking."""

import numpy as np
import pytest

from wormscreen.boosting import (StumpEnsemble, Stump, examples_from_arrays,
                                 score, train_adaboost)
from wormscreen.densescan import dense_score
from wormscreen.imagecore import GrayImage, filter_bank
from wormscreen.segmenter import (SegmenterConfig, WormSegment,
                                  feature_names, segment_features)


def tiny_cfg():
    return SegmenterConfig(scan_lengths=(10.0, 16.0), angle_step_deg=45.0)


@pytest.fixture(scope="module")
def trained_setup():
    """Small image with a dark horizontal bar, and a model trained on it."""
    rng = np.random.default_rng(0)
    img = 0.7 + 0.02 * rng.standard_normal((40, 44))
    img[15:27, 6:38] -= 0.25  # worm-like dark bar, 12 px tall
    img = GrayImage(np.clip(img, 0, 1))
    stack = filter_bank(img)
    cfg = tiny_cfg()

    pos = [WormSegment(float(x), 21.0, np.pi / 2, 12.0)
           for x in range(8, 36, 3)]
    neg = [WormSegment(rng.uniform(2, 41), rng.uniform(2, 37),
                       rng.uniform(0, np.pi), rng.uniform(10, 16))
           for _ in range(60)]
    X = np.stack([segment_features(stack, s, cfg) for s in pos + neg])
    y = np.array([1.0] * len(pos) + [-1.0] * len(neg))
    model = train_adaboost(examples_from_arrays(X, y), rounds=25,
                           feature_names=feature_names(stack.names, cfg))
    return img, stack, cfg, model


def direct_best(stack, model, cfg, x, y):
    """Oracle: evaluate every hypothesis through segment_features + score."""
    best = -np.inf
    best_ai, best_li = 0, 0
    for ai, angle in enumerate(cfg.angles):
        for li, length in enumerate(cfg.scan_lengths):
            seg = WormSegment(float(x), float(y), float(angle), float(length))
            s = score(model, segment_features(stack, seg, cfg))
            if s > best:
                best, best_ai, best_li = s, ai, li
    return best, best_ai, best_li


class TestDenseScore:
    def test_empty_ensemble_all_zero(self):
        img = GrayImage(np.random.default_rng(1).random((20, 25)))
        stack = filter_bank(img)
        cfg = tiny_cfg()
        model = StumpEnsemble(stumps=[],
                              dimensionality=len(stack.names) * 5 * 3)
        scores = dense_score(stack, model, cfg)
        assert np.all(scores.best_score == 0.0)
        assert np.all(scores.best_angle == 0)
        assert np.all(scores.best_length == 0)

    def test_matches_direct_scoring_exactly(self, trained_setup):
        img, stack, cfg, model = trained_setup
        scores = dense_score(stack, model, cfg)
        rng = np.random.default_rng(2)
        h, w = img.shape
        # interior, border, and corner pixels all take different code paths
        pts = {(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)}
        while len(pts) < 40:
            pts.add((int(rng.integers(0, w)), int(rng.integers(0, h))))
        for x in range(0, w, 7):
            pts.add((x, 0))
            pts.add((x, h - 1))
        for x, y in sorted(pts):
            expected, ai, li = direct_best(stack, model, cfg, x, y)
            assert scores.best_score[y, x] == expected, (x, y)
            assert scores.best_angle[y, x] == ai, (x, y)
            assert scores.best_length[y, x] == li, (x, y)

    def test_detects_bar_orientation(self, trained_setup):
        img, stack, cfg, model = trained_setup
        scores = dense_score(stack, model, cfg)
        # on the bar midline the modal best angle should be the vertical bin
        # (90 degrees = index 2 with 45-degree steps)
        mid = scores.best_angle[21, 10:34]
        counts = np.bincount(mid, minlength=len(cfg.angles))
        assert counts.argmax() == 2

    def test_parallel_serial_bit_identical(self, trained_setup):
        img, stack, cfg, model = trained_setup
        a = dense_score(stack, model, cfg, parallel=True)
        b = dense_score(stack, model, cfg, parallel=False)
        np.testing.assert_array_equal(a.best_score, b.best_score)
        np.testing.assert_array_equal(a.best_angle, b.best_angle)
        np.testing.assert_array_equal(a.best_length, b.best_length)

    def test_tie_break_smallest_indices(self):
        img = GrayImage(np.full((15, 18), 0.4))
        stack = filter_bank(img)
        cfg = tiny_cfg()
        dim = len(stack.names) * 5 * 3
        # stump on raw/on-rect whose threshold exceeds every value: the score
        # is the same for every hypothesis, so ties must resolve to (0, 0)
        model = StumpEnsemble(stumps=[Stump(1, 99.0, 0.5, -0.5)],
                              dimensionality=dim)
        scores = dense_score(stack, model, cfg)
        assert np.all(scores.best_score == 0.5)
        assert np.all(scores.best_angle == 0)
        assert np.all(scores.best_length == 0)

    def test_dimensionality_mismatch_rejected(self, trained_setup):
        img, stack, cfg, model = trained_setup
        bad = StumpEnsemble(stumps=model.stumps, dimensionality=7)
        with pytest.raises(ValueError):
            dense_score(stack, bad, cfg)
