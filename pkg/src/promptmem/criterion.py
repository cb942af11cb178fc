"""Set-prediction criterion: Hungarian matching, focal + L1 loss, postprocessing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import NumericError


@dataclass
class GroundTruth:
    labels: torch.Tensor  # (G,) int64
    boxes: torch.Tensor  # (G, 4) normalized cxcywh

    @classmethod
    def empty(cls) -> "GroundTruth":
        return cls(torch.zeros(0, dtype=torch.long), torch.zeros(0, 4))

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 0.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def generalized_box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU of xyxy boxes, ``(n, 4) x (m, 4) -> (n, m)``."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union.clamp(min=1e-12)
    lt_c = torch.min(a[:, None, :2], b[None, :, :2])
    rb_c = torch.max(a[:, None, 2:], b[None, :, 2:])
    hull = (rb_c - lt_c).clamp(min=0).prod(-1)
    return iou - (hull - union) / hull.clamp(min=1e-12)


def matching_cost(logits: torch.Tensor, boxes: torch.Tensor, gt: GroundTruth, weights: LossWeights) -> torch.Tensor:
    """``(Q, G)`` cost: ``-w_cls * p(class) + w_l1 * L1 [+ w_giou * -GIoU]``."""
    prob = logits.softmax(-1)
    cost = -weights.cls * prob[:, gt.labels] + weights.l1 * torch.cdist(boxes, gt.boxes.to(boxes.dtype), p=1)
    if weights.giou:
        cost = cost - weights.giou * generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt.boxes.to(boxes.dtype)))
    return cost


@torch.no_grad()
def hungarian_match(logits: torch.Tensor, boxes: torch.Tensor, gt: GroundTruth, weights: LossWeights | None = None) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of ground truths to queries.

    Returns ``(query, gt)`` pairs sorted by gt index.  Among equal-cost
    assignments the solver's row-order processing favours lower query indices.
    """
    if len(gt) == 0:
        return []
    cost = matching_cost(logits, boxes, gt, weights or LossWeights()).double().cpu().numpy()
    # solve gt-major so that ties resolve toward the lowest free query column
    gt_idx, q_idx = linear_sum_assignment(cost.T)
    return sorted(zip(q_idx.tolist(), gt_idx.tolist()), key=lambda p: p[1])


def assignment_cost(cost: np.ndarray, pairs: list[tuple[int, int]]) -> float:
    return float(sum(cost[q, g] for q, g in pairs))


def focal_terms(logits: torch.Tensor, target: torch.Tensor, background: int, alpha: float, gamma: float) -> torch.Tensor:
    """Per-query softmax focal loss ``-a_t (1 - p_t)^gamma log p_t``.

    Foreground targets use weight ``alpha`` and background ``1 - alpha``.
    """
    logp = F.log_softmax(logits, dim=-1).gather(-1, target.unsqueeze(-1)).squeeze(-1)
    p = logp.exp()
    a = torch.where(target == background, torch.full_like(p, 1 - alpha), torch.full_like(p, alpha))
    return -a * (1 - p).pow(gamma) * logp


def detection_loss(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gt: GroundTruth,
    matching: list[tuple[int, int]],
    weights: LossWeights | None = None,
    normalizer: float | None = None,
) -> dict[str, torch.Tensor]:
    """Loss for one image.

    Returns ``{"cls", "l1", "total"}`` where ``total = w_cls*cls + w_l1*l1``.
    Both terms are sums normalized by ``max(G, 1)`` (or ``normalizer``).
    """
    w = weights or LossWeights()
    for name, t in (("logits", logits), ("boxes", boxes), ("gt boxes", gt.boxes)):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values in {name}")
    n_queries, n_cls = logits.shape
    background = n_cls - 1
    target = torch.full((n_queries,), background, dtype=torch.long)
    norm = float(normalizer if normalizer is not None else max(len(gt), 1))
    if matching:
        q_idx = torch.tensor([q for q, _ in matching], dtype=torch.long)
        g_idx = torch.tensor([g for _, g in matching], dtype=torch.long)
        target[q_idx] = gt.labels[g_idx]
        l1 = (boxes[q_idx] - gt.boxes[g_idx].to(boxes.dtype)).abs().sum() / norm
    else:
        q_idx = g_idx = None
        l1 = boxes.sum() * 0.0
    cls = focal_terms(logits, target, background, w.focal_alpha, w.focal_gamma).sum() / norm
    total = w.cls * cls + w.l1 * l1
    out = {"cls": cls, "l1": l1}
    if w.giou and matching:
        giou = torch.diag(
            generalized_box_iou(box_cxcywh_to_xyxy(boxes[q_idx]), box_cxcywh_to_xyxy(gt.boxes[g_idx].to(boxes.dtype)))
        )
        out["giou"] = (1 - giou).sum() / norm
        total = total + w.giou * out["giou"]
    out["total"] = total
    if not torch.isfinite(total):
        raise NumericError("detection loss is not finite")
    return out


def batch_detection_loss(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    targets: list[GroundTruth],
    weights: LossWeights | None = None,
) -> tuple[torch.Tensor, list[list[tuple[int, int]]]]:
    """Match and sum per-image losses, normalized by the batch's box count."""
    w = weights or LossWeights()
    n_boxes = max(sum(len(t) for t in targets), 1)
    total = logits.sum() * 0.0
    matchings = []
    for i, gt in enumerate(targets):
        m = hungarian_match(logits[i], boxes[i], gt, w)
        matchings.append(m)
        total = total + detection_loss(logits[i], boxes[i], gt, m, w, normalizer=n_boxes)["total"]
    return total, matchings


@dataclass
class Detection:
    label: int
    score: float
    box: tuple[float, float, float, float]


def postprocess(logits: torch.Tensor, boxes: torch.Tensor, score_threshold: float = 0.5) -> list[Detection]:
    """Per-query best foreground class; keep scores strictly above the threshold. No NMS."""
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError("score threshold must lie in [0, 1]")
    prob = logits.detach().softmax(-1)[:, :-1]
    scores, labels = prob.max(-1)
    keep = (scores > score_threshold).nonzero().squeeze(1).tolist()
    bx = boxes.detach().clamp(0, 1)
    return [Detection(int(labels[i]), float(scores[i]), tuple(float(v) for v in bx[i])) for i in keep]


def detections_to_gt(dets: list[Detection]) -> GroundTruth:
    if not dets:
        return GroundTruth.empty()
    return GroundTruth(
        torch.tensor([d.label for d in dets], dtype=torch.long),
        torch.tensor([d.box for d in dets], dtype=torch.float32),
    )
