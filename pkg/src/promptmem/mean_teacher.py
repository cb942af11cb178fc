"""Mean-teacher scaffolding: EMA shadow weights and pseudo-label generation."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

from .criterion import Detection, postprocess
from .errors import StateError

QUERY_PARAM = "detector.query_embed"


def ema_update(shadow: dict[str, torch.Tensor], student: dict[str, torch.Tensor], alpha: float,
               exclude: tuple[str, ...] = ()) -> None:
    """In place ``shadow = alpha * shadow + (1 - alpha) * student``.

    Names in ``exclude`` are copied verbatim instead of blended.
    """
    if set(shadow) != set(student):
        missing = set(shadow) ^ set(student)
        raise StateError(f"teacher/student parameter names differ: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, s in shadow.items():
            src = student[name].detach()
            if s.shape != src.shape:
                raise StateError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(src.shape)}")
            if name in exclude:
                s.copy_(src)
            else:
                # lerp is exact at both ends: alpha=1 keeps the shadow, alpha=0 copies the student
                s.copy_(torch.lerp(s, src.to(s.dtype), 1.0 - alpha))


@dataclass
class PseudoLabelSet:
    detections: list[list[Detection]]
    threshold: float


class MeanTeacher:
    """EMA copy of a student model.

    ``shadow`` maps every student parameter name to the teacher's tensor.  The
    object-query embedding is bound to the student's and never blended.
    """

    def __init__(self, student: nn.Module, alpha: float = 0.999, bind: tuple[str, ...] = (QUERY_PARAM,)):
        if not 0.0 <= alpha <= 1.0:
            raise StateError("alpha must lie in [0, 1]")
        self.model = copy.deepcopy(student)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.alpha = alpha
        self.step = 0
        names = dict(student.named_parameters())
        self.bind = tuple(n for n in bind if n in names)

    @property
    def shadow(self) -> dict[str, torch.Tensor]:
        return dict(self.model.named_parameters())

    def update(self, student: nn.Module) -> None:
        ema_update(self.shadow, dict(student.named_parameters()), self.alpha, exclude=self.bind)
        self.step += 1

    def sync_object_queries(self, student: nn.Module) -> None:
        ours, theirs = self.shadow, dict(student.named_parameters())
        with torch.no_grad():
            for name in self.bind:
                if ours[name].shape != theirs[name].shape:
                    raise StateError(f"object query shapes differ for {name}")
                ours[name].copy_(theirs[name])

    @torch.no_grad()
    def pseudo_labels(self, images: torch.Tensor, threshold: float = 0.5, **forward_kwargs) -> PseudoLabelSet:
        out = self.model(images, **forward_kwargs).output
        dets = [postprocess(out.class_logits[i], out.boxes[i], threshold) for i in range(images.shape[0])]
        return PseudoLabelSet(dets, threshold)
