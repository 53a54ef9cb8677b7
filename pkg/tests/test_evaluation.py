import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panoptiq.data import BBox, SegMask
from panoptiq.evaluation import (
    EvalReport,
    average_precision,
    confusion_matrix,
    map50,
    miou,
    miou_from_confusion,
)


def P(img, x1, y1, x2, y2, cls, score):
    return (img, BBox(x1, y1, x2, y2, cls, score))


def G(img, x1, y1, x2, y2, cls):
    return (img, BBox(x1, y1, x2, y2, cls))


class TestAveragePrecision:
    def test_single_match_above_threshold(self):
        preds = [P("a", 0, 0, 10, 10, 0, 0.9)]
        gts = [G("a", 0, 0, 10, 12, 0)]  # IoU = 100/120 > 0.5
        assert average_precision(preds, gts, 0) == 1.0

    def test_single_match_below_threshold(self):
        preds = [P("a", 0, 0, 10, 4, 0, 0.9)]
        gts = [G("a", 0, 0, 10, 10, 0)]  # IoU = 0.4
        assert average_precision(preds, gts, 0) == 0.0

    def test_hand_built_pr_curve(self):
        # ranks: TP (0.9), FP (0.8), TP (0.7) over 2 GT boxes.
        # PR points: (0.5, 1.0), (0.5, 0.5), (1.0, 2/3)
        # all-point AP = 0.5 * 1.0 + 0.5 * (2/3) = 5/6
        gts = [G("a", 0, 0, 10, 10, 1), G("a", 30, 30, 40, 40, 1)]
        preds = [
            P("a", 0, 0, 10, 10, 1, 0.9),
            P("a", 60, 60, 70, 70, 1, 0.8),
            P("a", 30, 30, 40, 40, 1, 0.7),
        ]
        ap = average_precision(preds, gts, 1)
        assert ap == pytest.approx(5 / 6, abs=1e-12)

    def test_class_without_gt_is_undefined(self):
        assert average_precision([], [], 3) is None
        assert average_precision([P("a", 0, 0, 5, 5, 3, 0.9)], [], 3) is None

    def test_gt_matched_at_most_once(self):
        gts = [G("a", 0, 0, 10, 10, 0)]
        preds = [P("a", 0, 0, 10, 10, 0, 0.9), P("a", 0, 0, 10, 10, 0, 0.8)]
        # second identical prediction is a FP: AP stays 1.0 (recall already 1)
        assert average_precision(preds, gts, 0) == 1.0

    def test_duplicate_never_increases_ap(self):
        gts = [G("a", 0, 0, 10, 10, 0), G("a", 40, 0, 50, 10, 0)]
        preds = [P("a", 0, 0, 10, 10, 0, 0.9)]
        base = average_precision(preds, gts, 0)
        with_dup = average_precision(
            preds + [P("a", 0, 0, 10, 10, 0, 0.85)], gts, 0
        )
        assert with_dup <= base

    def test_matching_is_per_image(self):
        gts = [G("a", 0, 0, 10, 10, 0)]
        preds = [P("b", 0, 0, 10, 10, 0, 0.9)]  # right place, wrong image
        assert average_precision(preds, gts, 0) == 0.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_invariant_under_monotone_score_transform(self, seed):
        rng = np.random.default_rng(seed)
        gts, preds = [], []
        for i in range(rng.integers(1, 4)):
            x = float(rng.uniform(0, 80))
            gts.append(G("img", x, 0, x + 10, 10, 0))
        for i in range(rng.integers(1, 6)):
            x = float(rng.uniform(0, 80))
            preds.append(P("img", x, 0, x + 10, 10, 0, float(rng.uniform(0.01, 0.99))))
        base = average_precision(preds, gts, 0)
        squeezed = [(im, BBox(b.x1, b.y1, b.x2, b.y2, b.class_id, b.score**3))
                    for im, b in preds]
        assert average_precision(squeezed, gts, 0) == pytest.approx(base, abs=1e-12)

    def test_eleven_point_flag(self):
        gts = [G("a", 0, 0, 10, 10, 1), G("a", 30, 30, 40, 40, 1)]
        preds = [P("a", 0, 0, 10, 10, 1, 0.9)]
        ap11 = average_precision(preds, gts, 1, interpolation="11point")
        # recall 0.5 at precision 1: levels 0..0.5 give 1, others 0 -> 6/11
        assert ap11 == pytest.approx(6 / 11, abs=1e-12)


class TestMap50:
    def test_mean_over_defined_classes(self):
        preds = {"a": [BBox(0, 0, 10, 10, 0, 0.9), BBox(20, 20, 30, 30, 1, 0.8)]}
        gts = {"a": [BBox(0, 0, 10, 10, 0), BBox(20, 20, 30, 30, 1)]}
        mean, per_class = map50(preds, gts)
        assert mean == 1.0
        assert per_class["pedestrian"] == 1.0
        assert per_class["scooter"] is None

    def test_all_wrong(self):
        preds = {"a": [BBox(50, 50, 60, 60, 0, 0.9)]}
        gts = {"a": [BBox(0, 0, 10, 10, 0)]}
        mean, _ = map50(preds, gts)
        assert mean == 0.0

    def test_recombination_from_per_class(self):
        rng = np.random.default_rng(0)
        preds, gts = {"a": []}, {"a": []}
        for cls in range(4):
            for _ in range(3):
                x = float(rng.uniform(0, 100))
                gts["a"].append(BBox(x, 0, x + 8, 8, cls))
                if rng.random() < 0.7:
                    preds["a"].append(BBox(x, 0, x + 8, 8, cls, float(rng.random())))
        mean, per_class = map50(preds, gts)
        defined = [v for v in per_class.values() if v is not None]
        assert mean == pytest.approx(float(np.mean(defined)), abs=1e-12)


class TestMiou:
    def test_perfect(self):
        m = np.random.default_rng(0).integers(0, 3, (16, 16))
        mean, per_class, _ = miou([(m, m)], 3)
        assert mean == 1.0

    def test_half_foreground_oracle(self):
        gt = np.zeros((10, 10), dtype=np.int64)
        gt[:5] = 1
        pred = np.zeros_like(gt)
        mean, per_class, _ = miou([(pred, gt)], 2)
        assert per_class[0] == pytest.approx(0.5)
        assert per_class[1] == 0.0
        assert mean == pytest.approx(0.25)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        pairs = [(rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))) for _ in range(5)]
        a, _, _ = miou(pairs, 4)
        b, _, _ = miou(list(reversed(pairs)), 4)
        assert a == b

    def test_absent_class_counts_as_one(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        pred = np.zeros_like(gt)
        mean, per_class, _ = miou([(pred, gt)], 3)
        assert per_class[1] == 1.0 and per_class[2] == 1.0
        assert mean == 1.0

    def test_matches_per_pixel_brute_force(self):
        rng = np.random.default_rng(2)
        pairs = [(rng.integers(0, 3, (6, 6)), rng.integers(0, 3, (6, 6))) for _ in range(3)]
        _, per_class, _ = miou(pairs, 3)
        for c in range(3):
            tp = fp = fn = 0
            for pred, gt in pairs:
                for i in range(6):
                    for j in range(6):
                        p, g = pred[i, j] == c, gt[i, j] == c
                        tp += p and g
                        fp += p and not g
                        fn += g and not p
            expected = tp / (tp + fp + fn) if (tp + fp + fn) else 1.0
            assert per_class[c] == pytest.approx(expected, abs=1e-12)

    def test_accepts_segmask_inputs(self):
        m = SegMask(np.zeros((4, 4), dtype=np.uint8), "drivable")
        mean, _, _ = miou([(m, m)], 3)
        assert mean == 1.0

    def test_exclude_background_flag(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        gt[0, 0] = 1
        pred = np.zeros_like(gt)
        with_bg, _, _ = miou([(pred, gt)], 2, include_background=True)
        without_bg, _, _ = miou([(pred, gt)], 2, include_background=False)
        assert with_bg > without_bg

    def test_confusion_orientation(self):
        gt = np.array([[0, 1]])
        pred = np.array([[1, 1]])
        cm = confusion_matrix([(pred, gt)], 2)
        assert cm.tolist() == [[0, 1], [0, 1]]  # rows = GT, cols = prediction


class TestEvalReport:
    def _report(self):
        return EvalReport(
            map50=0.5,
            ap_per_class={"pedestrian": 0.5, "vehicle": None, "scooter": 0.5, "bicycle": 0.5},
            drivable_miou=0.8,
            lane_miou=0.6,
            merged_miou=0.7,
            drivable_iou_per_class=[0.9, 0.8, 0.7],
            lane_iou_per_class=[0.9, 0.5, 0.5, 0.5],
            merged_iou_per_class=[0.9] * 6,
            drivable_confusion=[[1, 0, 0], [0, 1, 0], [0, 0, 1]],
            lane_confusion=[[1] * 4] * 4,
            n_images=2,
        )

    def test_json_round_trip(self):
        r = self._report()
        again = EvalReport.from_json(r.to_json())
        assert again == r

    def test_metrics_bounded(self):
        with pytest.raises(ValueError):
            EvalReport(
                map50=1.2, ap_per_class={}, drivable_miou=0.5, lane_miou=0.5,
                merged_miou=0.5, drivable_iou_per_class=[], lane_iou_per_class=[],
                merged_iou_per_class=[], drivable_confusion=[], lane_confusion=[],
            )

    def test_table_mentions_all_tasks(self):
        text = self._report().format_table()
        assert "mAP@0.5" in text
        assert "Drivable" in text and "Lane" in text


def test_miou_from_confusion_mean_matches_per_class():
    cm = np.array([[50, 5, 0], [4, 30, 1], [0, 2, 8]], dtype=np.int64)
    mean, per_class = miou_from_confusion(cm)
    assert mean == pytest.approx(float(per_class.mean()))
