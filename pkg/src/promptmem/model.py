"""Detector plus prompt memory: the hierarchical injection forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .detector import DetectionOutput, DetectorConfig, ToyDetector
from .prompt_memory import InjectionPlan, PromptMemory, gather_prompts, pixel_frames, project_input, select_batch


@dataclass
class ForwardResult:
    output: DetectionOutput
    enc_seq: torch.Tensor
    enc_boundary: int
    dec_seq: torch.Tensor
    dec_boundary: int
    selections: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def image_tokens(self) -> torch.Tensor:
        return self.enc_seq[:, self.enc_boundary :]


class PromptedDetector(nn.Module):
    """A :class:`ToyDetector` with optional per-domain prompt memory.

    Selection keys: the input level uses the mean backbone token of the clean
    image, the token level the mean backbone token of the prompted image and
    the query level the mean encoder output over image rows.
    """

    def __init__(self, detector: ToyDetector, memory: PromptMemory | None = None):
        super().__init__()
        self.detector = detector
        self.memory = memory

    @property
    def config(self) -> DetectorConfig:
        return self.detector.config

    def forward(
        self,
        images: torch.Tensor,
        domain: str | None = None,
        plan: InjectionPlan | None = None,
        record: bool = False,
    ) -> ForwardResult:
        det = self.detector
        use = self.memory is not None and domain is not None and plan is not None
        active = (lambda level: use and plan.active(level))
        selections: dict[str, torch.Tensor] = {}

        def choose(level, embedding):
            pool = self.memory.pool(domain, level)
            idx = select_batch(pool, project_input(embedding), plan.m, plan.strategy, plan.generator, plan.eps)
            selections[level] = idx
            if record:
                self.memory.record(domain, level, idx)
            return pool, idx

        feats = None
        if active("input"):
            with torch.no_grad():
                clean = det.backbone_forward(images)
            pool, idx = choose("input", clean.tokens)
            if pool.border:
                images = images + pixel_frames(pool, idx).to(images.dtype)
        feats = det.backbone_forward(images)

        enc_prefix = None
        if active("token"):
            pool, idx = choose("token", feats.tokens.detach())
            enc_prefix = gather_prompts(pool, idx)
        memory = det.encoder_forward(feats, enc_prefix)
        enc_boundary = 0 if enc_prefix is None else enc_prefix.shape[1]

        dec_prefix = None
        if active("query"):
            pool, idx = choose("query", memory[:, enc_boundary:].detach())
            dec_prefix = gather_prompts(pool, idx)
        out = det.decoder_forward(memory, det.memory_positions(feats, enc_boundary), dec_prefix)
        dec_boundary = 0 if dec_prefix is None else dec_prefix.shape[1]
        return ForwardResult(out, memory, enc_boundary, out.hidden, dec_boundary, selections)


def build_model(detector_config: DetectorConfig, pdm_sizes: dict[str, int] | None, length: int, border: int,
                image_size: tuple[int, int], seed: int, init_scale: float = 0.03) -> PromptedDetector:
    detector = ToyDetector(detector_config, seed=seed)
    memory = None
    if pdm_sizes is not None:
        memory = PromptMemory(pdm_sizes, length, detector_config.dim, image_size, border,
                              channels=detector_config.channels, seed=seed, init_scale=init_scale)
    return PromptedDetector(detector, memory)
