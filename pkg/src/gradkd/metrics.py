"""Detection metrics (IoU, mAP@0.5) and target-map similarity."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .detector import box_iou


def iou(a, b) -> float:
    """Intersection over union of two (x0, y0, x1, y1) boxes."""
    return box_iou(tuple(a), tuple(b))


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    num_gts: int

    def average_precision(self) -> float:
        """All-point interpolated AP (area under the precision envelope)."""
        if self.num_gts == 0 or self.recall.size == 0:
            return 0.0
        r = np.concatenate([[0.0], self.recall])
        p = np.concatenate([self.precision, [0.0]])
        env = np.maximum.accumulate(p[::-1])[::-1][:-1]
        return float(np.sum((r[1:] - r[:-1]) * env))


def _box(obj):
    return tuple(obj.box) if hasattr(obj, "box") else tuple(obj[:4])


def _cls(obj):
    return obj.class_id if hasattr(obj, "class_id") else int(obj[4])


def _score(obj):
    return obj.score if hasattr(obj, "score") else float(obj[5])


def pr_curves(detections, gts, iou_thresh: float = 0.5) -> dict[int, PrCurve]:
    """Per-class precision/recall curves over a set of images.

    Detections are ranked by descending score (ties keep input order) and
    each is matched to the unmatched same-class GT in its image with the
    highest IoU, provided that IoU >= ``iou_thresh``.
    """
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detection lists vs {len(gts)} GT lists")
    gt_by_class: dict[int, dict[int, list]] = defaultdict(dict)
    n_gts: dict[int, int] = defaultdict(int)
    for img, boxes in enumerate(gts):
        for g in boxes:
            gt_by_class[_cls(g)].setdefault(img, []).append(_box(g))
            n_gts[_cls(g)] += 1
    dets_by_class = defaultdict(list)
    for img, dets in enumerate(detections):
        for d in dets:
            dets_by_class[_cls(d)].append((_score(d), img, _box(d)))

    curves = {}
    for c in sorted(set(n_gts) | set(dets_by_class)):
        ranked = sorted(dets_by_class[c], key=lambda t: -t[0])
        used = {img: [False] * len(b) for img, b in gt_by_class[c].items()}
        tp = np.zeros(len(ranked))
        for rank, (_, img, box) in enumerate(ranked):
            best, best_j = iou_thresh, -1
            for j, g in enumerate(gt_by_class[c].get(img, ())):
                if used[img][j]:
                    continue
                o = box_iou(box, g)
                if o >= best and (best_j < 0 or o > best):
                    best, best_j = o, j
            if best_j >= 0:
                used[img][best_j] = True
                tp[rank] = 1.0
        ctp = np.cumsum(tp)
        n = n_gts[c]
        recall = ctp / n if n else np.zeros_like(ctp)
        precision = ctp / np.arange(1, len(ranked) + 1) if ranked else ctp
        curves[c] = PrCurve(recall, precision, n)
    return curves


def map50(detections, gts, iou_thresh: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class AP and their unweighted mean; classes without GTs are skipped.

    Returns mAP 0.0 when no class has ground truth.
    """
    aps = {c: curve.average_precision() for c, curve in pr_curves(detections, gts, iou_thresh).items()
           if curve.num_gts > 0}
    return aps, (float(np.mean(list(aps.values()))) if aps else 0.0)


def mask_similarity(a, b) -> float:
    """1 - mean |a - b| for two maps with values in [0, 1]."""
    a = np.asarray(getattr(a, "data", a), dtype=float)
    b = np.asarray(getattr(b, "data", b), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"mask_similarity: shape mismatch {a.shape} vs {b.shape}")
    return float(1.0 - np.mean(np.abs(a - b)))
