"""Detection metrics: AP over IoU 0.50:0.05:0.95, AP50, AP75, and
AR@{1,10,100}, in class-agnostic or per-class mode.

Matching is the standard greedy protocol: per image (and per class in
per-class mode), detections in descending score order claim the
unmatched ground-truth box of highest IoU when that IoU clears the
threshold. Precision/recall curves use 101-point interpolation. Score
ties break by detection input order. AR@k averages per-image recall
(images with ground truth) over the threshold grid, with at most k
detections per image.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ComparisonError, EvalError
from .geometry import BoxXYXY, box_iou_matrix

IOU_THRESHOLDS = np.round(np.arange(0.50, 0.96, 0.05), 2)
RECALL_GRID = np.linspace(0.0, 1.0, 101)
AR_KS = (1, 10, 100)


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BoxXYXY
    score: float
    class_id: int = 0


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ar1: float
    ar10: float
    ar100: float
    per_class_ap: dict[str, float | None]
    n_images: int
    n_gt: int
    n_detections: int
    gt_fingerprint: str
    mode: str
    pr_curve_50: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AR@1": self.ar1,
            "AR@10": self.ar10,
            "AR@100": self.ar100,
            "per_class_AP": self.per_class_ap,
            "counts": {
                "images": self.n_images,
                "gt": self.n_gt,
                "detections": self.n_detections,
            },
            "gt_fingerprint": self.gt_fingerprint,
            "mode": self.mode,
            "pr_curve_50": self.pr_curve_50,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            ap=d["AP"],
            ap50=d["AP50"],
            ap75=d["AP75"],
            ar1=d["AR@1"],
            ar10=d["AR@10"],
            ar100=d["AR@100"],
            per_class_ap=d.get("per_class_AP", {}),
            n_images=d["counts"]["images"],
            n_gt=d["counts"]["gt"],
            n_detections=d["counts"]["detections"],
            gt_fingerprint=d["gt_fingerprint"],
            mode=d.get("mode", "class_agnostic"),
            pr_curve_50=d.get("pr_curve_50", []),
        )

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def load(cls, path: str) -> "EvalReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def metrics(self) -> dict[str, float]:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AR@1": self.ar1,
            "AR@10": self.ar10,
            "AR@100": self.ar100,
        }


def gt_fingerprint(dataset) -> str:
    """Hash of image ids, boxes, and labels; guards report comparisons."""
    h = hashlib.sha256()
    for rec in sorted(dataset.records, key=lambda r: r.image_id):
        h.update(rec.image_id.encode())
        h.update(np.ascontiguousarray(rec.gt_boxes.to_array()).tobytes())
        if rec.gt_classes is not None:
            h.update(np.ascontiguousarray(rec.gt_classes).tobytes())
    return h.hexdigest()


def _interpolated_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from per-detection TP flags (detections
    already in descending score order)."""
    if n_gt == 0 or len(scores) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(interp.mean())


def evaluate(
    detections: list[Detection],
    dataset,
    mode: str = "class_agnostic",
    top_n: int = 100,
) -> EvalReport:
    """Score detections against a dataset's ground truth.

    mode='class_agnostic' collapses every class to a single object
    category before matching; 'per_class' matches within classes and
    macro-averages AP over classes that have ground truth. top_n keeps
    the highest-scoring n detections per image.
    """
    if mode not in ("class_agnostic", "per_class"):
        raise EvalError(f"unknown eval mode {mode!r}")
    known = {rec.image_id for rec in dataset.records}
    for det in detections:
        if det.image_id not in known:
            raise EvalError(f"detection references unknown image {det.image_id!r}")

    # group ground truth
    gt_boxes: dict[str, np.ndarray] = {}
    gt_classes: dict[str, np.ndarray] = {}
    for rec in dataset.records:
        gt_boxes[rec.image_id] = rec.gt_boxes.to_array()
        if mode == "class_agnostic" or rec.gt_classes is None:
            gt_classes[rec.image_id] = np.zeros(rec.gt_boxes.count, dtype=np.int64)
        else:
            gt_classes[rec.image_id] = rec.gt_classes

    if mode == "class_agnostic":
        class_ids = [0]
        class_names = {0: "object"}
    else:
        class_ids = list(range(len(dataset.class_names)))
        class_names = dict(enumerate(dataset.class_names))

    # per-image top-n detections, globally ordered by (-score, input order)
    per_image: dict[str, list[tuple[int, Detection]]] = {i: [] for i in known}
    for idx, det in enumerate(detections):
        per_image[det.image_id].append((idx, det))
    kept: dict[str, list[tuple[int, Detection]]] = {}
    for image_id, dets in per_image.items():
        dets.sort(key=lambda t: (-t[1].score, t[0]))
        kept[image_id] = dets[:top_n]

    n_gt_total = sum(len(v) for v in gt_boxes.values())
    n_det_total = sum(len(v) for v in kept.values())

    # greedy matching per (threshold, image); record per-detection TP flags
    # in the image's score order, which makes top-k recall a prefix sum
    per_class_tp: dict[float, dict[int, list[tuple[float, int, bool]]]] = {
        t: {c: [] for c in class_ids} for t in IOU_THRESHOLDS
    }
    image_recalls: dict[float, dict[int, list[float]]] = {
        t: {k: [] for k in AR_KS} for t in IOU_THRESHOLDS
    }
    for image_id in sorted(known):
        boxes = gt_boxes[image_id]
        classes = gt_classes[image_id]
        dets = kept[image_id]
        det_arr = (
            np.array([d.box.as_tuple() for _, d in dets]) if dets else np.zeros((0, 4))
        )
        det_cls = np.array(
            [0 if mode == "class_agnostic" else d.class_id for _, d in dets], dtype=np.int64
        )
        ious = box_iou_matrix(det_arr, boxes) if len(det_arr) and len(boxes) else None
        for t in IOU_THRESHOLDS:
            taken = np.zeros(len(boxes), dtype=bool)
            flags = np.zeros(len(dets), dtype=bool)
            for pos, (orig_idx, det) in enumerate(dets):
                if ious is None:
                    break
                candidates = (~taken) & (classes == det_cls[pos])
                if not candidates.any():
                    continue
                row = np.where(candidates, ious[pos], -1.0)
                j = int(np.argmax(row))
                if row[j] >= t:
                    taken[j] = True
                    flags[pos] = True
            for pos, (orig_idx, det) in enumerate(dets):
                per_class_tp[t][det_cls[pos]].append(
                    (det.score, orig_idx, bool(flags[pos]))
                )
            if len(boxes):
                for k in AR_KS:
                    image_recalls[t][k].append(float(flags[:k].sum()) / len(boxes))

    # AP per class per threshold
    ap_table: dict[int, dict[float, float]] = {}
    class_gt_counts = {
        c: sum(int((gt_classes[i] == c).sum()) for i in known) for c in class_ids
    }
    for c in class_ids:
        ap_table[c] = {}
        for t in IOU_THRESHOLDS:
            entries = sorted(per_class_tp[t][c], key=lambda e: (-e[0], e[1]))
            tp = np.array([e[2] for e in entries], dtype=bool)
            scores = np.array([e[0] for e in entries])
            ap_table[c][t] = _interpolated_ap(scores, tp, class_gt_counts[c])

    valid_classes = [c for c in class_ids if class_gt_counts[c] > 0]

    def mean_ap(thresholds) -> float:
        if not valid_classes:
            return 0.0
        return float(
            np.mean([[ap_table[c][t] for t in thresholds] for c in valid_classes])
        )

    ar = {}
    for k in AR_KS:
        per_t = [
            float(np.mean(image_recalls[t][k])) if image_recalls[t][k] else 0.0
            for t in IOU_THRESHOLDS
        ]
        ar[k] = float(np.mean(per_t))

    per_class_ap = {
        class_names[c]: (
            float(np.mean([ap_table[c][t] for t in IOU_THRESHOLDS]))
            if class_gt_counts[c] > 0
            else None
        )
        for c in class_ids
    }

    # merged PR curve at IoU .5 for reporting
    all_entries = sorted(
        (e for c in class_ids for e in per_class_tp[0.5][c]),
        key=lambda e: (-e[0], e[1]),
    )
    curve = []
    if all_entries and n_gt_total:
        tp_cum = np.cumsum([e[2] for e in all_entries])
        fp_cum = np.cumsum([not e[2] for e in all_entries])
        recall = tp_cum / n_gt_total
        precision = tp_cum / (tp_cum + fp_cum)
        curve = [[float(r), float(p)] for r, p in zip(recall, precision)]

    return EvalReport(
        ap=mean_ap(IOU_THRESHOLDS),
        ap50=mean_ap([0.5]),
        ap75=mean_ap([0.75]),
        ar1=ar[1],
        ar10=ar[10],
        ar100=ar[100],
        per_class_ap=per_class_ap,
        n_images=len(known),
        n_gt=n_gt_total,
        n_detections=n_det_total,
        gt_fingerprint=gt_fingerprint(dataset),
        mode=mode,
        pr_curve_50=curve,
    )


def compare_runs(reports: list[EvalReport]) -> dict:
    """Per-metric values, deltas against the first report, and mean/std
    across reports. All reports must share a ground-truth fingerprint."""
    if len(reports) < 2:
        raise ComparisonError("need at least 2 reports to compare")
    fp = reports[0].gt_fingerprint
    for r in reports[1:]:
        if r.gt_fingerprint != fp:
            raise ComparisonError("reports evaluated on different ground truth")
    table = {}
    for name in reports[0].metrics():
        values = [r.metrics()[name] for r in reports]
        table[name] = {
            "values": values,
            "delta_vs_first": [v - values[0] for v in values],
            "mean": float(np.mean(values)),
            "std": float(np.std(values)),
        }
    return table
