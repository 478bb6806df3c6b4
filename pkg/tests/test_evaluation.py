import numpy as np
import pytest

from priordet.data import Dataset, ImageRecord
from priordet.errors import ComparisonError, EvalError
from priordet.evaluation import Detection, compare_runs, evaluate
from priordet.geometry import BoxBatch, BoxXYXY


def make_dataset(gt):
    """gt: {image_id: [(box tuple, class), ...]}"""
    records = []
    for image_id, items in gt.items():
        boxes = BoxBatch([BoxXYXY(*b) for b, _ in items])
        classes = np.array([c for _, c in items], dtype=np.int64)
        records.append(
            ImageRecord(
                image_id=image_id, width=100, height=100, gt_boxes=boxes, gt_classes=classes
            )
        )
    return Dataset(records=records, class_names=("a", "b", "c"))


def overlap_box(base, iou_target):
    """A box sharing the y-extent of `base`, shifted in x for a given IoU."""
    x1, y1, x2, y2 = base
    w = x2 - x1
    shift = w * (1 - iou_target) / (1 + iou_target)
    return (x1 + shift, y1, x2 + shift, y2)


class TestHandTraces:
    def test_perfect_detector(self):
        ds = make_dataset({"i1": [((0.1, 0.1, 0.4, 0.4), 0), ((0.5, 0.5, 0.9, 0.9), 1)]})
        dets = [
            Detection("i1", BoxXYXY(0.1, 0.1, 0.4, 0.4), 1.0, 0),
            Detection("i1", BoxXYXY(0.5, 0.5, 0.9, 0.9), 1.0, 1),
        ]
        for mode in ("class_agnostic", "per_class"):
            rep = evaluate(dets, ds, mode=mode)
            assert rep.ap == rep.ap50 == rep.ar100 == 1.0

    def test_no_detections(self):
        ds = make_dataset({"i1": [((0.1, 0.1, 0.4, 0.4), 0)]})
        rep = evaluate([], ds)
        assert rep.ap == rep.ap50 == rep.ap75 == 0.0
        assert rep.ar1 == rep.ar10 == rep.ar100 == 0.0

    def test_two_gt_one_good_one_bad_pred(self):
        gt1 = (0.1, 0.1, 0.5, 0.5)
        gt2 = (0.6, 0.6, 0.9, 0.9)
        ds = make_dataset({"i1": [(gt1, 0), (gt2, 0)]})
        pred_a = overlap_box(gt1, 0.9)
        pred_b = overlap_box(gt2, 0.3)
        dets = [
            Detection("i1", BoxXYXY(*pred_a), 0.9, 0),
            Detection("i1", BoxXYXY(*pred_b), 0.8, 0),
        ]
        rep = evaluate(dets, ds, mode="class_agnostic")
        assert rep.ap50 == pytest.approx(51 / 101)
        assert rep.ap75 == pytest.approx(51 / 101)
        # AR@100 at threshold .5 alone would be .5; the report averages
        # thresholds .5...95, where pred_a still matches (IoU .9 >= t)
        assert rep.ar100 == pytest.approx(
            np.mean([0.5 if t <= 0.9 else 0.0 for t in np.arange(0.5, 0.96, 0.05)])
        )

    def test_single_threshold_recall_value(self):
        gt1 = (0.1, 0.1, 0.5, 0.5)
        gt2 = (0.6, 0.6, 0.9, 0.9)
        ds = make_dataset({"i1": [(gt1, 0), (gt2, 0)]})
        dets = [
            Detection("i1", BoxXYXY(*overlap_box(gt1, 0.51)), 0.9, 0),
            Detection("i1", BoxXYXY(*overlap_box(gt2, 0.3)), 0.8, 0),
        ]
        rep = evaluate(dets, ds)
        # matches only at t=0.5 -> AR@100 = 0.5 / 10 thresholds
        assert rep.ar100 == pytest.approx(0.5 / 10)


class TestInvariants:
    def _random_case(self, seed):
        rng = np.random.default_rng(seed)
        gt = {}
        dets = []
        for i in range(4):
            items = []
            for _ in range(rng.integers(1, 4)):
                x, y = rng.uniform(0, 0.5, 2)
                w, h = rng.uniform(0.15, 0.4, 2)
                box = (x, y, min(1, x + w), min(1, y + h))
                items.append((box, int(rng.integers(0, 3))))
                if rng.random() < 0.8:
                    jitter = rng.normal(0, 0.03, 4)
                    moved = np.clip(np.array(box) + jitter, 0, 1)
                    if moved[2] > moved[0] and moved[3] > moved[1]:
                        dets.append(
                            Detection(
                                f"i{i}",
                                BoxXYXY(*moved),
                                float(rng.random()),
                                items[-1][1],
                            )
                        )
            gt[f"i{i}"] = items
        return make_dataset(gt), dets

    def test_score_monotone_transform_invariance(self):
        ds, dets = self._random_case(0)
        rep1 = evaluate(dets, ds)
        squashed = [
            Detection(d.image_id, d.box, float(np.tanh(d.score * 3) + 5), d.class_id)
            for d in dets
        ]
        rep2 = evaluate(squashed, ds)
        assert rep1.ap == rep2.ap and rep1.ap50 == rep2.ap50
        assert rep1.ar100 == rep2.ar100

    def test_low_score_far_fp_never_raises_ap(self):
        ds, dets = self._random_case(1)
        rep1 = evaluate(dets, ds)
        lowest = min(d.score for d in dets)
        spiked = dets + [
            Detection("i0", BoxXYXY(0.96, 0.96, 1.0, 1.0), lowest - 0.1, 0)
        ]
        rep2 = evaluate(spiked, ds)
        assert rep2.ap <= rep1.ap + 1e-12
        assert rep2.ap50 <= rep1.ap50 + 1e-12

    def test_ar_monotone_in_k(self):
        ds, dets = self._random_case(2)
        rep = evaluate(dets, ds)
        assert rep.ar1 <= rep.ar10 + 1e-12
        assert rep.ar10 <= rep.ar100 + 1e-12

    def test_ap_not_below_strict_thresholds(self):
        ds, dets = self._random_case(3)
        rep = evaluate(dets, ds)
        assert rep.ap75 <= rep.ap50 + 1e-12
        assert rep.ap <= rep.ap50 + 1e-12

    def test_top_n_caps_detections(self):
        ds = make_dataset({"i1": [((0.1, 0.1, 0.5, 0.5), 0)]})
        dets = [
            Detection("i1", BoxXYXY(0.6, 0.6, 0.9, 0.9), 1.0 - i * 1e-3, 0)
            for i in range(20)
        ]
        rep = evaluate(dets, ds, top_n=5)
        assert rep.n_detections == 5


class TestModes:
    def test_class_agnostic_ignores_labels(self):
        gt_box = (0.2, 0.2, 0.6, 0.6)
        ds = make_dataset({"i1": [(gt_box, 2)]})
        det = [Detection("i1", BoxXYXY(*gt_box), 1.0, 0)]  # wrong class
        agn = evaluate(det, ds, mode="class_agnostic")
        per = evaluate(det, ds, mode="per_class")
        assert agn.ap50 == 1.0
        assert per.ap50 == 0.0

    def test_per_class_table(self):
        ds = make_dataset(
            {"i1": [((0.1, 0.1, 0.4, 0.4), 0), ((0.5, 0.5, 0.9, 0.9), 1)]}
        )
        dets = [
            Detection("i1", BoxXYXY(0.1, 0.1, 0.4, 0.4), 1.0, 0),
            Detection("i1", BoxXYXY(0.5, 0.5, 0.9, 0.9), 1.0, 1),
        ]
        rep = evaluate(dets, ds, mode="per_class")
        assert rep.per_class_ap["a"] == 1.0
        assert rep.per_class_ap["b"] == 1.0
        assert rep.per_class_ap["c"] is None  # no GT of class c

    def test_unknown_image_rejected(self):
        ds = make_dataset({"i1": [((0.1, 0.1, 0.4, 0.4), 0)]})
        with pytest.raises(EvalError):
            evaluate([Detection("ghost", BoxXYXY(0, 0, 1, 1), 1.0, 0)], ds)


class TestCompareRuns:
    def _report(self, seed):
        ds = make_dataset({"i1": [((0.1, 0.1, 0.5, 0.5), 0)]})
        rng = np.random.default_rng(seed)
        jitter = rng.normal(0, 0.02, 4)
        box = np.clip(np.array([0.1, 0.1, 0.5, 0.5]) + jitter, 0, 1)
        return evaluate([Detection("i1", BoxXYXY(*box), 1.0, 0)], ds)

    def test_self_comparison_zero_delta(self):
        rep = self._report(0)
        table = compare_runs([rep, rep])
        for name, row in table.items():
            assert row["delta_vs_first"] == [0.0, 0.0]
            assert row["std"] == 0.0

    def test_mean_over_five_seeds(self):
        reports = [self._report(s) for s in range(5)]
        table = compare_runs(reports)
        vals = [r.ap50 for r in reports]
        assert table["AP50"]["mean"] == pytest.approx(np.mean(vals))

    def test_fingerprint_mismatch(self):
        a = self._report(0)
        other_ds = make_dataset({"i2": [((0.3, 0.3, 0.7, 0.7), 1)]})
        b = evaluate([], other_ds)
        with pytest.raises(ComparisonError):
            compare_runs([a, b])


class TestReportIO:
    def test_json_roundtrip(self, tmp_path):
        ds = make_dataset({"i1": [((0.1, 0.1, 0.5, 0.5), 0)]})
        rep = evaluate([Detection("i1", BoxXYXY(0.1, 0.1, 0.5, 0.5), 1.0, 0)], ds)
        path = str(tmp_path / "report.json")
        rep.save(path)
        from priordet.evaluation import EvalReport

        loaded = EvalReport.load(path)
        assert loaded.metrics() == rep.metrics()
        assert loaded.gt_fingerprint == rep.gt_fingerprint
