"""Prompt memory alignment.

Each domain projects its prompted sequences through its own MLP into a shared
256-channel space.  A discriminator scores every projected token; the loss is

    lambda1 * mean(scores[:boundary]) - lambda2 * mean(scores[boundary:])

The discriminator sees the projections through a gradient reversal layer, so
one backward pass trains it to separate prompt rows from the rest while the
prompts and heads are pushed the other way.  The discriminator is shared by
both domains, so both prompt sets are pulled toward one common region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError

log = logging.getLogger(__name__)

SHARED_DIM = 256


@dataclass
class AlignmentConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    reversal_scale: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "reversal_scale"):
            v = float(getattr(self, name))
            if not v >= 0 or v == float("inf"):
                raise ConfigError(f"{name} must be finite and non-negative")


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


def reverse_gradient(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-scale``."""
    if scale < 0:
        raise ConfigError("reversal scale must be non-negative")
    return _GradReverse.apply(x, float(scale))


class ProjectionHead(nn.Module):
    def __init__(self, dim: int, out_dim: int = SHARED_DIM, hidden: int | None = None):
        super().__init__()
        hidden = hidden or out_dim
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ConfigError(f"projection head expects dimension {self.dim}, got {x.shape[-1]}")
        return self.net(x)


class DomainDiscriminator(nn.Module):
    """Three (linear, ReLU) blocks in series, then a sigmoid scalar per token."""

    def __init__(self, dim: int = SHARED_DIM, hidden: int | None = None, blocks: int = 3):
        super().__init__()
        hidden = hidden or dim
        layers, width = [], dim
        for _ in range(blocks):
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        layers.append(nn.Linear(width, 1))
        self.net = nn.Sequential(*layers)

    def logits(self, x):
        return self.net(x).squeeze(-1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def prompt_alignment_loss(scores: torch.Tensor, boundary: int, config: AlignmentConfig | None = None) -> torch.Tensor:
    """Signed means over the prompt block (``i < boundary``) and the remainder.

    ``scores`` is ``(T',)`` or ``(B, T')``; means run over all listed positions.
    """
    cfg = config or AlignmentConfig()
    length = scores.shape[-1]
    if not 0 <= boundary <= length:
        raise ConfigError(f"boundary {boundary} outside sequence of length {length}")
    zero = scores.sum() * 0.0
    if boundary == 0:
        if cfg.lambda1 > 0:
            log.warning("alignment loss with empty prompt block; prompt term contributes 0")
        prompt_term = zero
    else:
        prompt_term = scores[..., :boundary].mean()
    rest_term = scores[..., boundary:].mean() if boundary < length else zero
    return cfg.lambda1 * prompt_term - cfg.lambda2 * rest_term


epa_loss = prompt_alignment_loss
dpa_loss = prompt_alignment_loss


class PromptAlignment(nn.Module):
    """Projection heads for both domains plus encoder and decoder discriminators."""

    def __init__(self, dim: int, shared_dim: int = SHARED_DIM, config: AlignmentConfig | None = None):
        super().__init__()
        self.config = config or AlignmentConfig()
        self.heads = nn.ModuleDict({"source": ProjectionHead(dim, shared_dim), "target": ProjectionHead(dim, shared_dim)})
        self.enc_disc = DomainDiscriminator(shared_dim)
        self.dec_disc = DomainDiscriminator(shared_dim)

    def project_prompts(self, embeddings: torch.Tensor, domain: str) -> torch.Tensor:
        if domain not in self.heads:
            raise ConfigError(f"no projection head for domain {domain!r}")
        return self.heads[domain](embeddings)

    def _loss(self, disc: DomainDiscriminator, seq: torch.Tensor, domain: str, boundary: int) -> torch.Tensor:
        projected = self.project_prompts(seq, domain)
        scores = disc(reverse_gradient(projected, self.config.reversal_scale))
        return prompt_alignment_loss(scores, boundary, self.config)

    def encoder_loss(self, seq: torch.Tensor, domain: str, boundary: int) -> torch.Tensor:
        return self._loss(self.enc_disc, seq, domain, boundary)

    def decoder_loss(self, seq: torch.Tensor, domain: str, boundary: int) -> torch.Tensor:
        return self._loss(self.dec_disc, seq, domain, boundary)
