"""Metric stack against hand-computed values and the brute-force oracle."""

import numpy as np
import pytest

from msdet.boxes import DetBox, GtBox, iou
from msdet.evaluation import (
    IOU_THRESHOLDS,
    average_precision,
    evaluate,
    match,
    precision_recall,
)

from oracles import evaluate_ref, random_eval_instance


class TestIou:
    def test_identical(self):
        assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_hand_case_one_seventh(self):
        # intersection 1, union 7
        assert abs(iou((0, 0, 2, 2), (1, 1, 3, 3)) - 1.0 / 7.0) < 1e-12


class TestMatch:
    def test_simple_tp(self):
        gts = [GtBox(0, (0, 0, 10, 10))]
        dets = [DetBox(0, 0.9, (1, 1, 10, 10))]
        res = match(gts, dets, 0.5)
        assert (res.tp, res.fp, res.fn) == (1, 0, 0)

    def test_single_match_rule(self):
        gts = [GtBox(0, (0, 0, 10, 10))]
        dets = [DetBox(0, 0.9, (0, 0, 10, 10)), DetBox(0, 0.8, (1, 1, 10, 10))]
        res = match(gts, dets, 0.5)
        assert (res.tp, res.fp, res.fn) == (1, 1, 0)
        assert res.flags == ["tp", "fp"]

    def test_difficult_absorbs(self):
        gts = [GtBox(0, (0, 0, 10, 10), difficult=True)]
        dets = [DetBox(0, 0.9, (0, 0, 10, 10))]
        res = match(gts, dets, 0.5)
        assert res.flags == ["ignored"]
        assert (res.tp, res.fp, res.fn) == (0, 0, 0)

    def test_matches_bruteforce_on_random_instances(self):
        rng = np.random.default_rng(0)
        from oracles import match_ref

        for trial in range(100):
            gts = []
            for _ in range(int(rng.integers(0, 11))):
                x0, y0 = rng.uniform(0, 40, 2)
                w, h = rng.uniform(2, 15, 2)
                gts.append(GtBox(0, (x0, y0, x0 + w, y0 + h), bool(rng.uniform() < 0.2)))
            dets = []
            for _ in range(int(rng.integers(0, 21))):
                x0, y0 = rng.uniform(0, 40, 2)
                w, h = rng.uniform(2, 15, 2)
                dets.append(DetBox(0, float(rng.uniform()), (x0, y0, x0 + w, y0 + h)))
            t = float(rng.choice([0.3, 0.5, 0.7]))
            res = match(gts, dets, t)
            flags_ref, tp, fp, fn = match_ref(gts, dets, t)
            assert res.flags == [f for _, f in flags_ref]
            assert (res.tp, res.fp, res.fn) == (tp, fp, fn)


class TestPrecisionRecall:
    def test_precision(self):
        assert precision_recall(8, 2, 0)[0] == 0.8

    def test_recall(self):
        assert precision_recall(8, 0, 2)[1] == 0.8

    def test_zero_over_zero_convention(self):
        assert precision_recall(0, 0, 0) == (0.0, 0.0)


class TestAveragePrecision:
    def test_single_perfect(self):
        assert average_precision([(0.9, True)], 1) == 1.0

    def test_no_detections(self):
        assert average_precision([], 3) == 0.0

    def test_hand_case_five_sixths(self):
        # 2 GT, dets ordered (TP, FP, TP): envelope gives 0.5*1 + 0.5*(2/3)
        pairs = [(0.9, True), (0.8, False), (0.7, True)]
        assert abs(average_precision(pairs, 2) - 5.0 / 6.0) < 1e-12

    def test_score_order_only_matters(self):
        rng = np.random.default_rng(1)
        pairs = [(float(s), bool(rng.uniform() < 0.5)) for s in rng.uniform(0.1, 0.9, 15)]
        base = average_precision(pairs, 6)
        squashed = [(s**3 * 0.5, flag) for s, flag in pairs]  # strictly monotone
        assert abs(average_precision(squashed, 6) - base) < 1e-12

    def test_duplicate_fp_never_raises_ap(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            pairs = [(float(rng.uniform()), bool(rng.uniform() < 0.5)) for _ in range(10)]
            base = average_precision(pairs, 4)
            fps = [p for p in pairs if not p[1]]
            if not fps:
                continue
            extra = average_precision(pairs + [fps[0]], 4)
            assert extra <= base + 1e-12


class TestEvaluate:
    def test_perfect_detector(self):
        rng = np.random.default_rng(3)
        gt_by_image, det_by_image = {}, {}
        for k in range(5):
            gts = []
            dets = []
            for _ in range(3):
                x0, y0 = rng.uniform(0, 50, 2)
                w, h = rng.uniform(3, 12, 2)
                cls = int(rng.integers(0, 2))
                gts.append(GtBox(cls, (x0, y0, x0 + w, y0 + h)))
                dets.append(DetBox(cls, 0.95, (x0, y0, x0 + w, y0 + h)))
            gt_by_image[f"im{k}"] = gts
            det_by_image[f"im{k}"] = dets
        rep = evaluate(gt_by_image, det_by_image)
        assert rep.map50 == 1.0
        assert rep.map50_95 == 1.0
        assert rep.precision == 1.0 and rep.recall == 1.0

    def test_map_is_mean_of_class_aps(self):
        rng = np.random.default_rng(4)
        gt_by_image, det_by_image = random_eval_instance(rng, max_classes=3)
        rep = evaluate(gt_by_image, det_by_image)
        if rep.map50 is not None:
            aps = [rep.ap[c][IOU_THRESHOLDS[0]] for c in rep.ap]
            assert abs(rep.map50 - sum(aps) / len(aps)) < 1e-12

    def test_empty_dataset_marker(self):
        rep = evaluate({}, {})
        assert rep.no_classes
        assert rep.map50 is None
        assert "classes=none" in rep.to_kv()

    def test_metrics_in_unit_interval(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            gt, det = random_eval_instance(rng)
            rep = evaluate(gt, det)
            vals = [rep.precision, rep.recall]
            if rep.map50 is not None:
                vals += [rep.map50, rep.map50_95]
                vals += [rep.ap[c][t] for c in rep.ap for t in IOU_THRESHOLDS]
            assert all(0.0 <= v <= 1.0 for v in vals)

    def test_oracle_equivalence_200_instances(self):
        rng = np.random.default_rng(6)
        for trial in range(200):
            gt, det = random_eval_instance(rng)
            rep = evaluate(gt, det)
            ref = evaluate_ref(gt, det, IOU_THRESHOLDS, 0.25)
            assert abs(rep.precision - ref["precision"]) < 1e-9
            assert abs(rep.recall - ref["recall"]) < 1e-9
            if ref["map50"] is None:
                assert rep.map50 is None
            else:
                assert abs(rep.map50 - ref["map50"]) < 1e-9
                assert abs(rep.map50_95 - ref["map50_95"]) < 1e-9
                for c in ref["ap"]:
                    for t in IOU_THRESHOLDS:
                        assert abs(rep.ap[c][t] - ref["ap"][c][t]) < 1e-9

    def test_threshold_count_is_ten(self):
        assert len(IOU_THRESHOLDS) == 10
        assert IOU_THRESHOLDS[0] == 0.5
        assert abs(IOU_THRESHOLDS[-1] - 0.95) < 1e-12
