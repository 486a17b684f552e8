"""Detection and segmentation figures of merit: Dice, IoU, mAP@50, case accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .detect2seg import BBox, DetectionSet, Mask
from .fileio import SCHEMA_VERSION

CONVENTIONS = {
    "ap_interpolation": "all-point (area under the monotone precision envelope)",
    "ap_matching": "greedy by descending score (ties: case_id, then input order); "
                   "each detection takes the highest-IoU unmatched gt of its class in its image; TP iff IoU >= threshold",
    "map": "unweighted mean over classes with at least one gt box",
    "mean_iou": "per image with >=1 gt box: IoU of the highest-scoring predicted box with its best gt box; "
                "no prediction counts 0",
    "mean_dice": "Dice of the OR-merged predicted mask per case, averaged over cases that have a gt mask",
    "dice_both_empty": 1.0,
    "iou_empty_union": 1.0,
    "iou_threshold": 0.5,
}


@dataclass(frozen=True)
class GroundTruth:
    case_id: str
    label: str
    boxes: tuple[BBox, ...] = ()
    mask: Mask | None = None
    height: int = 0
    width: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.label == "healthy" and self.boxes:
            raise ValueError(f"{self.case_id}: healthy case cannot carry gt boxes")


def _check_same(a: Mask, b: Mask) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")


def dice(pred: Mask, gt: Mask) -> float:
    _check_same(pred, gt)
    total = pred.area + gt.area
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred.bits & gt.bits)) / total


def iou_mask(a: Mask, b: Mask) -> float:
    _check_same(a, b)
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.bits & b.bits)) / union


def iou_box(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP from cumulative recall/precision arrays."""
    r = np.concatenate(([0.0], recall, [recall[-1] if len(recall) else 0.0]))
    p = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


@dataclass
class APResult:
    per_class: dict[str, float]
    n_gt: dict[str, int]
    n_det: dict[str, int]
    excluded: list[str] = field(default_factory=list)

    @property
    def map(self) -> float | None:
        if not self.per_class:
            return None
        return float(np.mean([self.per_class[c] for c in sorted(self.per_class)]))


def match_class(
    dets: Sequence[tuple[str, int, BBox]],
    gts: Mapping[str, Sequence[BBox]],
    iou_threshold: float,
) -> list[bool]:
    """Greedy TP/FP flags for detections ``(case_id, input_index, box)`` of one class."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2].score, dets[i][0], dets[i][1]))
    taken = {case: [False] * len(boxes) for case, boxes in gts.items()}
    flags = [False] * len(dets)
    for i in order:
        case, _, box = dets[i]
        candidates = gts.get(case, ())
        best, best_j = -1.0, -1
        for j, g in enumerate(candidates):
            if taken[case][j]:
                continue
            v = iou_box(box, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            taken[case][best_j] = True
            flags[i] = True
    return [flags[i] for i in order]


def average_precision(
    detections: Sequence[DetectionSet],
    ground_truth: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> APResult:
    """Per-class AP with all detections of a class pooled across images."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    gt_by_class: dict[str, dict[str, list[BBox]]] = {}
    for g in ground_truth:
        for b in g.boxes:
            label = b.label or g.label
            gt_by_class.setdefault(label, {}).setdefault(g.case_id, []).append(b)
    det_by_class: dict[str, list[tuple[str, int, BBox]]] = {}
    for ds in detections:
        for i, b in enumerate(ds.boxes):
            det_by_class.setdefault(b.label, []).append((ds.case_id, i, b))

    result = APResult({}, {}, {})
    for label in sorted(set(gt_by_class) | set(det_by_class)):
        gts = gt_by_class.get(label, {})
        n_gt = sum(len(v) for v in gts.values())
        dets = det_by_class.get(label, [])
        result.n_gt[label] = n_gt
        result.n_det[label] = len(dets)
        if n_gt == 0:
            result.excluded.append(label)
            continue
        if not dets:
            result.per_class[label] = 0.0
            continue
        tp = np.array(match_class(dets, gts, iou_threshold), dtype=float)
        ctp = np.cumsum(tp)
        cfp = np.cumsum(1.0 - tp)
        result.per_class[label] = envelope_ap(ctp / n_gt, ctp / (ctp + cfp))
    return result


def mean_detection_iou(detections: Sequence[DetectionSet], ground_truth: Sequence[GroundTruth]) -> float | None:
    """Top-scoring box vs its best gt, averaged over gt-bearing images; ``None`` if there are none."""
    by_case = {d.case_id: d for d in detections}
    values = []
    for g in ground_truth:
        if not g.boxes:
            continue
        ds = by_case.get(g.case_id)
        if ds is None or not ds.boxes:
            values.append(0.0)
            continue
        top = max(enumerate(ds.boxes), key=lambda ib: (ib[1].score, -ib[0]))[1]
        values.append(max(iou_box(top, b) for b in g.boxes))
    if not values:
        return None
    return float(np.mean(values))


def case_accuracy(predicted: Mapping[str, str], truth: Mapping[str, str]) -> float:
    if not truth:
        raise ValueError("no cases to score")
    if set(predicted) != set(truth):
        missing = sorted(set(truth) ^ set(predicted))
        raise ValueError(f"case ids do not align: {missing}")
    correct = sum(predicted[c] == truth[c] for c in truth)
    return correct / len(truth)


def mean_dice(pred_masks: Mapping[str, Mask], ground_truth: Sequence[GroundTruth]) -> float | None:
    """Average Dice over cases carrying a gt mask; tumor cases must have one."""
    values = []
    for g in ground_truth:
        if g.mask is None:
            if g.label != "healthy":
                raise ValueError(f"{g.case_id}: tumor case without a gt mask")
            continue
        pred = pred_masks.get(g.case_id)
        if pred is None:
            pred = Mask.zeros(*g.mask.shape)
        values.append(dice(pred, g.mask))
    if not values:
        return None
    return float(np.mean(values))


@dataclass
class MetricsReport:
    map50: float | None
    mean_iou: float | None
    mean_dice: float | None
    case_accuracy: float | None
    per_class: dict[str, dict[str, Any]]
    counts: dict[str, int]
    excluded_classes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "conventions": dict(CONVENTIONS),
            "metrics": {
                "map50": self.map50,
                "mean_iou": self.mean_iou,
                "mean_dice": self.mean_dice,
                "case_accuracy": self.case_accuracy,
            },
            "per_class": self.per_class,
            "counts": self.counts,
            "excluded_classes": self.excluded_classes,
        }


def build_report(
    detections: Sequence[DetectionSet],
    ground_truth: Sequence[GroundTruth],
    predicted_classes: Mapping[str, str] | None = None,
    pred_masks: Mapping[str, Mask] | None = None,
) -> MetricsReport:
    gts = sorted(ground_truth, key=lambda g: g.case_id)
    dets = sorted(detections, key=lambda d: d.case_id)
    ap = average_precision(dets, gts, CONVENTIONS["iou_threshold"])
    per_class = {
        label: {"ap50": ap.per_class.get(label), "n_gt": ap.n_gt[label], "n_det": ap.n_det[label]}
        for label in sorted(ap.n_gt)
    }
    accuracy = None
    if predicted_classes is not None:
        accuracy = case_accuracy(predicted_classes, {g.case_id: g.label for g in gts})
    md = mean_dice(pred_masks, gts) if pred_masks is not None else None
    counts = {
        "cases": len(gts),
        "gt_boxes": sum(len(g.boxes) for g in gts),
        "pred_boxes": sum(len(d.boxes) for d in dets),
    }
    return MetricsReport(ap.map, mean_detection_iou(dets, gts), md, accuracy, per_class, counts, ap.excluded)
