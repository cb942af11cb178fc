"""mAP at a fixed IoU threshold with all-point interpolated precision."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ImageDetections:
    labels: np.ndarray  # (n,)
    scores: np.ndarray  # (n,)
    boxes: np.ndarray  # (n, 4) cxcywh


@dataclass
class ImageTruth:
    labels: np.ndarray  # (g,)
    boxes: np.ndarray  # (g, 4) cxcywh


def box_iou_cxcywh(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a1, a2 = a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2
    b1, b2 = b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2
    lt = np.maximum(a1[:, None], b1[None])
    rb = np.minimum(a2[:, None], b2[None])
    inter = np.clip(rb - lt, 0, None).prod(-1)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def all_point_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope, summed at recall changes."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def class_ap(dets: list[ImageDetections], truths: list[ImageTruth], cls: int, iou_threshold: float = 0.5) -> float | None:
    """AP of one class, or ``None`` when the class has no ground truth."""
    gt_boxes = [t.boxes[t.labels == cls] for t in truths]
    n_gt = sum(len(g) for g in gt_boxes)
    if n_gt == 0:
        return None
    entries = []
    for img, d in enumerate(dets):
        sel = np.nonzero(d.labels == cls)[0]
        entries.extend((float(d.scores[i]), img, d.boxes[i]) for i in sel)
    if not entries:
        return 0.0
    # stable: equal scores keep image order
    order = sorted(range(len(entries)), key=lambda k: -entries[k][0])
    taken = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    tp = np.zeros(len(order))
    for rank, k in enumerate(order):
        _, img, box = entries[k]
        g = gt_boxes[img]
        if not len(g):
            continue
        ious = box_iou_cxcywh(box, g)[0]
        ious[taken[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            taken[img][best] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    return all_point_ap(recall, precision)


def mean_average_precision(
    dets: list[ImageDetections], truths: list[ImageTruth], num_classes: int, iou_threshold: float = 0.5
) -> tuple[float, dict[int, float]]:
    """Mean AP over classes that have ground truth, plus the per-class values."""
    if len(dets) != len(truths):
        raise ValueError("detections and truths must cover the same images")
    per_class = {}
    for c in range(num_classes):
        ap = class_ap(dets, truths, c, iou_threshold)
        if ap is not None:
            per_class[c] = ap
    if not per_class:
        log.warning("no ground truth for any class; mAP defined as 0")
        return 0.0, {}
    return float(np.mean(list(per_class.values()))), per_class
