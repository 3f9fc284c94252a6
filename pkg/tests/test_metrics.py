"""mAP and PSNR arithmetic."""

import numpy as np
import pytest

from glod.decode import Detection
from glod.metrics import (
    EvalResult, average_precision, heatmap_psnr, map_at, write_report,
)


def det(c, s, box):
    return Detection(class_id=c, score=s, box=box)


class TestAveragePrecision:
    def test_single_det_iou_between_thresholds(self):
        gts = {"i": [(0.0, 0.0, 10.0, 10.0)]}
        dets = {"i": [(0.9, (0.0, 0.0, 10.0, 6.0))]}  # IoU 0.6
        assert average_precision(dets, gts, 0.5) == 1.0
        assert average_precision(dets, gts, 0.75) == 0.0

    def test_perfect_detections(self):
        gts = {"a": [(0, 0, 4, 4), (10, 10, 20, 20)], "b": [(2, 2, 6, 6)]}
        dets = {img: [(0.9, b) for b in boxes] for img, boxes in gts.items()}
        assert average_precision(dets, gts, 0.5) == 1.0
        assert average_precision(dets, gts, 0.75) == 1.0

    def test_hand_computed_pr_curve(self):
        """2 GT, [TP .9, FP .8, TP .7] -> AP = 1*0.5 + (2/3)*0.5 = 0.8333."""
        gts = {"i": [(0, 0, 10, 10), (20, 20, 30, 30)]}
        dets = {"i": [(0.9, (0, 0, 10, 10)),
                      (0.8, (50, 50, 60, 60)),
                      (0.7, (20, 20, 30, 30))]}
        ap = average_precision(dets, gts, 0.5)
        assert ap == pytest.approx(1.0 * 0.5 + (2 / 3) * 0.5, abs=1e-6)
        assert ap == pytest.approx(0.8333, abs=1e-4)

    def test_zero_gt_raises(self):
        with pytest.raises(ValueError):
            average_precision({"i": [(0.9, (0, 0, 1, 1))]}, {"i": []}, 0.5)

    def test_score_rescaling_invariance(self):
        gts = {"i": [(0, 0, 10, 10), (20, 20, 30, 30)]}
        base = [(0.9, (0, 0, 10, 10)), (0.5, (40, 40, 50, 50)),
                (0.3, (20, 20, 30, 30))]
        scaled = [(s * 0.1 + 0.05, b) for s, b in base]
        assert average_precision({"i": base}, gts, 0.5) == \
            average_precision({"i": scaled}, gts, 0.5)

    def test_fp_above_all_tps_never_raises_ap(self):
        gts = {"i": [(0, 0, 10, 10)]}
        clean = {"i": [(0.9, (0, 0, 10, 10))]}
        noisy = {"i": [(0.95, (50, 50, 60, 60)), (0.9, (0, 0, 10, 10))]}
        assert average_precision(noisy, gts, 0.5) <= \
            average_precision(clean, gts, 0.5)

    def test_greedy_matches_best_iou_first(self):
        gts = {"i": [(0, 0, 10, 10), (0, 0, 14, 14)]}
        dets = {"i": [(0.9, (0, 0, 13.5, 13.5))]}
        # the detection overlaps both; it must take the higher-IoU GT
        assert average_precision(dets, gts, 0.5) == pytest.approx(0.5)


class TestMapAt:
    def test_single_class_equals_ap(self):
        gts = {"i": [(1, (0, 0, 10, 10))]}
        dets = {"i": [det(1, 0.9, (0, 0, 10, 10))]}
        m, per = map_at(dets, gts, 0.5)
        assert m == per[1] == 1.0

    def test_two_class_mean(self):
        gts = {"i": [(0, (0, 0, 10, 10)), (1, (20, 20, 30, 30))]}
        dets = {"i": [det(0, 0.9, (0, 0, 10, 10))]}
        m, per = map_at(dets, gts, 0.5)
        assert per[0] == 1.0 and per[1] == 0.0
        assert m == pytest.approx(0.5)

    def test_image_order_invariance(self):
        gts1 = {"a": [(0, (0, 0, 10, 10))], "b": [(0, (5, 5, 9, 9))]}
        dets1 = {"a": [det(0, 0.8, (0, 0, 10, 10))], "b": [det(0, 0.9, (5, 5, 9, 9))]}
        gts2 = dict(reversed(list(gts1.items())))
        dets2 = dict(reversed(list(dets1.items())))
        assert map_at(dets1, gts1, 0.5)[0] == map_at(dets2, gts2, 0.5)[0]

    def test_absent_class_excluded(self):
        gts = {"i": [(0, (0, 0, 10, 10))]}
        dets = {"i": [det(0, 0.9, (0, 0, 10, 10)), det(4, 0.99, (1, 1, 2, 2))]}
        m, per = map_at(dets, gts, 0.5)
        assert 4 not in per and m == 1.0

    def test_strict_threshold_never_higher(self):
        rng = np.random.default_rng(5)
        gts = {"i": [(0, (x, x, x + 8, x + 8)) for x in range(0, 40, 10)]}
        dets = {"i": [det(0, float(rng.uniform(0.2, 1.0)),
                          (x + rng.uniform(0, 3), x, x + 8, x + 8))
                      for x in range(0, 40, 10)]}
        m50, _ = map_at(dets, gts, 0.5)
        m75, _ = map_at(dets, gts, 0.75)
        assert m75 <= m50

    def test_no_gt_raises(self):
        with pytest.raises(ValueError):
            map_at({"i": []}, {"i": []}, 0.5)


class TestPSNR:
    def test_equal_maps_capped(self):
        x = np.random.default_rng(0).uniform(size=(3, 8, 8))
        assert heatmap_psnr(x, x) == 100.0

    def test_mse_001_gives_20db(self):
        gt = np.zeros((1, 10, 10))
        pred = gt + 0.1
        assert heatmap_psnr(pred, gt) == pytest.approx(20.0, abs=1e-9)

    def test_mse_1_gives_0db(self):
        gt = np.zeros((1, 4, 4))
        assert heatmap_psnr(gt + 1.0, gt) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_and_decreasing_in_mse(self):
        rng = np.random.default_rng(1)
        gt = rng.uniform(size=(2, 6, 6))
        a = gt + 0.05
        b = gt + 0.2
        assert heatmap_psnr(a, gt) == heatmap_psnr(gt, a)
        assert heatmap_psnr(b, gt) < heatmap_psnr(a, gt)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            heatmap_psnr(np.zeros((1, 2, 2)), np.zeros((1, 3, 2)))


class TestReport:
    def test_csv_layout(self, tmp_path):
        res = EvalResult(ap50={0: 1.0, 1: 0.5}, ap75={0: 0.8, 1: 0.25},
                         psnr={0: 40.0, 1: 35.0},
                         gt_counts={0: 4, 1: 2}, det_counts={0: 5, 1: 2},
                         map50=0.75, map75=0.525)
        path = tmp_path / "report.csv"
        write_report(path, res)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("class_id")
        assert len(lines) == 4
        assert lines[-1].startswith("summary,0.750000,0.525000")
