"""A small end-to-end detection transformer.

Strided convolutions produce a token grid, a standard multi-head attention
encoder/decoder refines it and set-prediction heads emit ``Q`` slots of class
logits and normalized ``(cx, cy, w, h)`` boxes.  Prompt prefixes can be fed to
the encoder and decoder; prefix rows carry zero positional encoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError


@dataclass
class DetectorConfig:
    dim: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    queries: int = 25
    classes: int = 3
    stride: int = 8
    ffn: int = 128
    channels: int = 3
    dropout: float = 0.0


@dataclass
class FeatureTokens:
    tokens: torch.Tensor  # (B, T, d)
    pos: torch.Tensor  # (T, d)
    image_size: tuple[int, int]


@dataclass
class DetectionOutput:
    class_logits: torch.Tensor  # (B, Q, K+1)
    boxes: torch.Tensor  # (B, Q, 4)
    hidden: torch.Tensor | None = None  # decoder output incl. prompt slots, (B, P+Q, d)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def sine_positions(height: int, width: int, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """2-D sine/cosine encoding, ``(H*W, dim)``."""
    if dim % 4:
        raise ConfigError("positional encoding needs dim divisible by 4")
    quarter = dim // 4
    freqs = temperature ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(
        (torch.arange(height, dtype=torch.float64) + 0.5) / height * 2 * math.pi,
        (torch.arange(width, dtype=torch.float64) + 0.5) / width * 2 * math.pi,
        indexing="ij",
    )
    ys = ys.reshape(-1, 1) / freqs
    xs = xs.reshape(-1, 1) / freqs
    pos = torch.cat([ys.sin(), ys.cos(), xs.sin(), xs.cos()], dim=1)
    return pos.float()


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn, dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ffn), nn.ReLU(), nn.Linear(ffn, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, pos):
        h = self.norm1(x)
        q = h + pos
        x = x + self.attn(q, q, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn, dropout):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ffn), nn.ReLU(), nn.Linear(ffn, dim))
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, tgt, query_pos, memory, memory_pos):
        h = self.norm1(tgt)
        q = h + query_pos
        tgt = tgt + self.self_attn(q, q, h, need_weights=False)[0]
        h = self.norm2(tgt)
        tgt = tgt + self.cross_attn(h + query_pos, memory + memory_pos, memory, need_weights=False)[0]
        return tgt + self.ff(self.norm3(tgt))


class ToyDetector(nn.Module):
    def __init__(self, config: DetectorConfig | None = None, seed: int | None = None):
        super().__init__()
        cfg = config or DetectorConfig()
        if cfg.queries < 1:
            raise ConfigError("the detector needs at least one object query")
        if cfg.stride not in (2, 4, 8, 16):
            raise ConfigError("stride must be a power of two between 2 and 16")
        self.config = cfg
        if seed is not None:
            torch.manual_seed(seed)
        n_convs = int(math.log2(cfg.stride))
        widths = [cfg.channels] + [min(cfg.dim, 16 * 2**i) for i in range(n_convs - 1)] + [cfg.dim]
        convs = []
        for i in range(n_convs):
            convs.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
            if i < n_convs - 1:
                convs.append(nn.ReLU())
        self.backbone = nn.Sequential(*convs)
        self.encoder = nn.ModuleList(EncoderLayer(cfg.dim, cfg.heads, cfg.ffn, cfg.dropout) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg.dim, cfg.heads, cfg.ffn, cfg.dropout) for _ in range(cfg.dec_layers))
        # object queries drawn once from a normal distribution at construction
        self.enc_norm = nn.LayerNorm(cfg.dim)
        self.dec_norm = nn.LayerNorm(cfg.dim)
        self.query_embed = nn.Parameter(torch.randn(cfg.queries, cfg.dim))
        self.ref_point = nn.Linear(cfg.dim, 2)
        self.class_head = nn.Linear(cfg.dim, cfg.classes + 1)
        self.box_head = nn.Sequential(nn.Linear(cfg.dim, cfg.dim), nn.ReLU(), nn.Linear(cfg.dim, 4))
        self._pos_cache: dict[tuple[int, int], torch.Tensor] = {}

    # -- stages -------------------------------------------------------------

    def positions(self, height: int, width: int) -> torch.Tensor:
        key = (height, width)
        if key not in self._pos_cache:
            self._pos_cache[key] = sine_positions(height, width, self.config.dim)
        return self._pos_cache[key]

    def backbone_forward(self, images: torch.Tensor) -> FeatureTokens:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        _, _, height, width = images.shape
        s = self.config.stride
        if height % s or width % s:
            raise ConfigError(f"image size {height}x{width} not divisible by stride {s}")
        fmap = self.backbone(images)
        tokens = fmap.flatten(2).transpose(1, 2)
        pos = self.positions(height // s, width // s).to(tokens.dtype)
        return FeatureTokens(tokens, pos, (height, width))

    def encoder_forward(self, feats: FeatureTokens, prefix: torch.Tensor | None = None) -> torch.Tensor:
        """Encode the image tokens with an optional ``(B, P, d)`` prompt prefix.

        Returns ``(B, P + T, d)``; the first ``P`` rows are the carried prefix.
        """
        x, pos = feats.tokens, feats.pos
        if pos.shape != x.shape[1:]:
            raise ConfigError(f"token shape {tuple(x.shape[1:])} and positional shape {tuple(pos.shape)} disagree")
        if prefix is not None and prefix.shape[1] > 0:
            if prefix.shape[0] != x.shape[0] or prefix.shape[2] != x.shape[2]:
                raise ConfigError("prompt prefix does not match the token batch")
            x = torch.cat([prefix.to(x.dtype), x], dim=1)
            pos = torch.cat([pos.new_zeros(prefix.shape[1], pos.shape[1]), pos], dim=0)
        for layer in self.encoder:
            x = layer(x, pos)
        return self.enc_norm(x)

    def memory_positions(self, feats: FeatureTokens, prefix_len: int) -> torch.Tensor:
        pos = feats.pos
        if prefix_len:
            pos = torch.cat([pos.new_zeros(prefix_len, pos.shape[1]), pos], dim=0)
        return pos

    def decoder_forward(
        self,
        memory: torch.Tensor,
        memory_pos: torch.Tensor,
        prefix: torch.Tensor | None = None,
    ) -> DetectionOutput:
        """Decode ``Q`` object slots; prompt slots are prepended and dropped from the heads."""
        batch = memory.shape[0]
        query_pos = self.query_embed.to(memory.dtype).unsqueeze(0).expand(batch, -1, -1)
        tgt = torch.zeros_like(query_pos)
        n_prompt = 0
        if prefix is not None and prefix.shape[1] > 0:
            n_prompt = prefix.shape[1]
            tgt = torch.cat([prefix.to(memory.dtype), tgt], dim=1)
            query_pos = torch.cat([query_pos.new_zeros(batch, n_prompt, query_pos.shape[2]), query_pos], dim=1)
        for layer in self.decoder:
            tgt = layer(tgt, query_pos, memory, memory_pos)
        tgt = self.dec_norm(tgt)
        obj = tgt[:, n_prompt:]
        logits = self.class_head(obj)
        ref = torch.sigmoid(self.ref_point(self.query_embed.to(memory.dtype)))
        delta = self.box_head(obj)
        offset = torch.cat([inverse_sigmoid(ref), ref.new_zeros(ref.shape[0], 2)], dim=1)
        boxes = torch.sigmoid(delta + offset)
        return DetectionOutput(logits, boxes, tgt)

    def forward(self, images: torch.Tensor) -> DetectionOutput:
        feats = self.backbone_forward(images)
        memory = self.encoder_forward(feats)
        return self.decoder_forward(memory, feats.pos)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
