"""Prompt domain memory: pools of (distribution value, prompt weight) pairs.

Three injection levels exist (``input``, ``token``, ``query``) and every level
keeps one pool per domain.  A pool stores ``N`` key vectors (the distribution
values) of size ``d`` and ``N`` prompt weights.  Token and query pools store
``L x d`` prefixes; input pools store a learnable pixel border frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

LEVELS = ("input", "token", "query")
DOMAINS = ("source", "target")
STRATEGIES = ("distribution", "random", "kmeans")

DEFAULT_EPS = 1e-12


def border_mask(height: int, width: int, border: int) -> torch.Tensor:
    """Boolean ``H x W`` mask that is True on a frame of width ``border``."""
    mask = torch.zeros(height, width, dtype=torch.bool)
    if border > 0:
        mask[:border, :] = True
        mask[-border:, :] = True
        mask[:, :border] = True
        mask[:, -border:] = True
    return mask


@dataclass
class SelectionResult:
    """Indices chosen from one pool, ordered by descending similarity."""

    indices: list[int]
    similarities: list[float]

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise DataError("selection indices must be distinct")


@dataclass
class PromptEntry:
    index: int
    value: np.ndarray
    weight: np.ndarray


class PromptPool(nn.Module):
    """One memory pool for a single (level, domain) pair.

    ``value`` has shape ``(N, d)``.  ``weight`` has shape ``(N, L, d)`` for
    token/query pools and ``(N, C, P)`` for input pools, where ``P`` is the
    number of border pixels of an ``H x W`` canvas.
    """

    def __init__(
        self,
        level: str,
        domain: str,
        size: int,
        length: int,
        dim: int,
        seed: int = 0,
        init_scale: float = 0.03,
        channels: int = 3,
        border: int = 0,
        image_size: tuple[int, int] | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if level not in LEVELS:
            raise ConfigError(f"unknown prompt level {level!r}")
        if domain not in DOMAINS:
            raise ConfigError(f"unknown domain {domain!r}")
        if size < 1 or length < 1 or dim < 1:
            raise ConfigError(f"pool sizes must be positive, got N={size} L={length} d={dim}")
        if init_scale < 0:
            raise ConfigError("init_scale must be non-negative")
        self.level = level
        self.domain = domain
        self.size = size
        self.length = length
        self.dim = dim
        self.init_scale = init_scale

        gen = torch.Generator().manual_seed(int(seed))
        value = (torch.rand(size, dim, generator=gen, dtype=torch.float64) * 2 - 1) * init_scale
        if level == "input":
            if image_size is None:
                raise ConfigError("input-level pools need the image size")
            height, width = image_size
            if border < 0 or 2 * border >= min(height, width):
                raise ConfigError(f"border width {border} incompatible with {height}x{width} images")
            self.channels = channels
            self.border = border
            self.image_size = (height, width)
            self.register_buffer("mask", border_mask(height, width, border), persistent=False)
            n_pix = int(self.mask.sum())
            weight = (torch.rand(size, channels, n_pix, generator=gen, dtype=torch.float64) * 2 - 1) * init_scale
        else:
            self.channels = None
            self.border = None
            self.image_size = None
            weight = (torch.rand(size, length, dim, generator=gen, dtype=torch.float64) * 2 - 1) * init_scale
        self.value = nn.Parameter(value.to(dtype))
        self.weight = nn.Parameter(weight.to(dtype))

    @property
    def pixel_shape(self) -> tuple[int, int] | None:
        if self.level != "input":
            return None
        return (self.channels, self.border)

    def entries(self) -> list[PromptEntry]:
        v = self.value.detach().cpu().numpy()
        w = self.weight.detach().cpu().numpy()
        return [PromptEntry(i, v[i].copy(), w[i].copy()) for i in range(self.size)]

    def metadata(self) -> dict:
        meta = {"N": self.size, "L": self.length, "d": self.dim, "level": self.level, "domain": self.domain}
        if self.level == "input":
            meta.update(channels=self.channels, border=self.border, image_size=list(self.image_size))
        return meta

    def extra_repr(self) -> str:
        return f"level={self.level}, domain={self.domain}, N={self.size}, L={self.length}, d={self.dim}"


def init_pool(level: str, domain: str, size: int, length: int, dim: int, seed: int, **kwargs) -> PromptPool:
    return PromptPool(level, domain, size, length, dim, seed=seed, **kwargs)


def project_input(embedding: torch.Tensor) -> torch.Tensor:
    """Mean over the token axis: ``(..., T, d) -> (..., d)``."""
    embedding = torch.as_tensor(embedding)
    if embedding.dim() < 2 or embedding.shape[-2] == 0:
        raise DataError("cannot project an empty embedding")
    return embedding.mean(dim=-2)


def similarity(v: torch.Tensor, q: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Cosine similarity along the last axis, broadcasting.

    Pairs where either vector has norm below ``eps`` get similarity 0 and a
    logged warning instead of an exception.
    """
    v = torch.as_tensor(v)
    q = torch.as_tensor(q)
    nv = v.norm(dim=-1)
    nq = q.norm(dim=-1)
    dot = (v * q).sum(-1)
    denom = nv * nq
    degenerate = (nv < eps) | (nq < eps)
    if bool(degenerate.any()):
        log.warning("similarity: %d degenerate vector pair(s) below eps=%g, using 0", int(degenerate.sum()), eps)
    safe = torch.where(degenerate, torch.ones_like(denom), denom)
    out = torch.where(degenerate, torch.zeros_like(dot), dot / safe)
    return out.clamp(-1.0, 1.0)


def _rank(sims: torch.Tensor, m: int) -> tuple[torch.Tensor, torch.Tensor]:
    # stable descending sort: equal similarities keep the lower index first
    order = torch.sort(-sims, dim=-1, stable=True).indices[..., :m]
    return order, torch.gather(sims, -1, order)


def similarity_matrix(queries: torch.Tensor, keys: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
    """``(B, d) x (N, d) -> (B, N)`` cosine similarities."""
    return similarity(queries.unsqueeze(-2), keys.unsqueeze(-3), eps=eps)


def select_top_m(pool: PromptPool, input_embedding: torch.Tensor, m: int, eps: float = DEFAULT_EPS) -> SelectionResult:
    """Pick the ``m`` entries whose values are most similar to the pooled input."""
    if not 1 <= m <= pool.size:
        raise ConfigError(f"M={m} must lie in [1, N={pool.size}]")
    query = project_input(input_embedding)
    with torch.no_grad():
        sims = similarity(pool.value.detach().to(query.dtype), query.unsqueeze(0), eps=eps)
        order, top = _rank(sims, m)
    return SelectionResult(order.tolist(), top.tolist())


def select_batch(
    pool: PromptPool,
    queries: torch.Tensor,
    m: int,
    strategy: str = "distribution",
    generator: torch.Generator | None = None,
    eps: float = DEFAULT_EPS,
) -> torch.Tensor:
    """Batched selection: ``queries`` is ``(B, d)``; returns ``(B, m)`` indices.

    ``distribution`` ranks by cosine similarity, ``random`` draws a uniform
    m-subset per sample and ``kmeans`` clusters the pool values into ``m``
    groups, assigns each query to its nearest centre and takes the ``m``
    entries closest to that centre.
    """
    if not 1 <= m <= pool.size:
        raise ConfigError(f"M={m} must lie in [1, N={pool.size}]")
    values = pool.value.detach()
    with torch.no_grad():
        if strategy == "distribution":
            sims = similarity_matrix(queries.detach().to(values.dtype), values, eps=eps)
            return _rank(sims, m)[0]
        if strategy == "random":
            scores = torch.rand(queries.shape[0], pool.size, generator=generator)
            return torch.sort(scores, dim=-1).indices[:, :m]
        if strategy == "kmeans":
            centres = kmeans_centres(values, m)
            q = queries.detach().to(values.dtype)
            nearest = similarity_matrix(q, centres, eps=eps).argmax(dim=-1)
            to_centre = similarity_matrix(centres, values, eps=eps)  # (m, N)
            return _rank(to_centre[nearest], m)[0]
    raise ConfigError(f"unknown selection strategy {strategy!r}")


def kmeans_centres(values: torch.Tensor, k: int, iters: int = 20) -> torch.Tensor:
    """Deterministic Lloyd iterations seeded with the first ``k`` values."""
    x = values.double()
    centres = x[:k].clone()
    for _ in range(iters):
        assign = torch.cdist(x, centres).argmin(dim=1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centres[j] = members.mean(0)
    return centres.to(values.dtype)


def gather_prompts(pool: PromptPool, indices: torch.Tensor) -> torch.Tensor:
    """Selected token prompts concatenated in selection order: ``(B, M*L, d)``."""
    w = pool.weight[indices]  # (B, M, L, d)
    return w.reshape(indices.shape[0], -1, pool.dim)


def inject_tokens(tokens: torch.Tensor, selection: SelectionResult | Sequence[int] | torch.Tensor | None, pool: PromptPool) -> torch.Tensor:
    """Prepend the selected prompt weights to ``tokens`` (``T x d`` or ``B x T x d``)."""
    if pool.level == "input":
        raise ConfigError("inject_tokens needs a token or query pool")
    idx = _as_index(selection)
    if idx is None or idx.numel() == 0:
        return tokens
    batched = tokens.dim() == 3
    if not batched:
        tokens = tokens.unsqueeze(0)
    if idx.dim() == 1:
        idx = idx.unsqueeze(0).expand(tokens.shape[0], -1)
    prefix = gather_prompts(pool, idx).to(tokens.dtype)
    out = torch.cat([prefix, tokens], dim=1)
    return out if batched else out.squeeze(0)


def pixel_frames(pool: PromptPool, indices: torch.Tensor) -> torch.Tensor:
    """Average of the selected border frames scattered to ``(B, C, H, W)``."""
    height, width = pool.image_size
    mean_w = pool.weight[indices].mean(dim=1)  # (B, C, P)
    frame = mean_w.new_zeros(indices.shape[0], pool.channels, height * width)
    flat_mask = pool.mask.reshape(-1).nonzero().squeeze(1)
    frame = frame.index_copy(2, flat_mask, mean_w)
    return frame.reshape(indices.shape[0], pool.channels, height, width)


def inject_input(image: torch.Tensor, selection: SelectionResult | Sequence[int] | torch.Tensor | None, pool: PromptPool) -> torch.Tensor:
    """Add the averaged selected border frame to ``image`` (``C,H,W`` or ``B,C,H,W``)."""
    if pool.level != "input":
        raise ConfigError("inject_input needs an input-level pool")
    batched = image.dim() == 4
    if not batched:
        image = image.unsqueeze(0)
    if image.shape[1] != pool.channels or tuple(image.shape[-2:]) != pool.image_size:
        raise ConfigError(f"image shape {tuple(image.shape[1:])} incompatible with pool {pool.pixel_shape} {pool.image_size}")
    idx = _as_index(selection)
    if idx is None or idx.numel() == 0 or pool.border == 0:
        out = image
    else:
        if idx.dim() == 1:
            idx = idx.unsqueeze(0).expand(image.shape[0], -1)
        out = image + pixel_frames(pool, idx).to(image.dtype)
    return out if batched else out.squeeze(0)


def _as_index(selection) -> torch.Tensor | None:
    if selection is None:
        return None
    if isinstance(selection, SelectionResult):
        return torch.as_tensor(selection.indices, dtype=torch.long)
    return torch.as_tensor(selection, dtype=torch.long)


def selection_histogram(log_: Iterable[SelectionResult | Sequence[int]], size: int) -> np.ndarray:
    counts = np.zeros(size, dtype=np.int64)
    for sel in log_:
        idx = np.asarray(sel.indices if isinstance(sel, SelectionResult) else sel, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= size):
            raise DataError(f"selection index out of range for pool of size {size}")
        np.add.at(counts, idx, 1)
    return counts


class PromptMemory(nn.Module):
    """The six pools of a configured model, keyed ``<domain>/<level>``."""

    def __init__(
        self,
        sizes: dict[str, int],
        length: int,
        dim: int,
        image_size: tuple[int, int],
        border: int,
        channels: int = 3,
        seed: int = 0,
        init_scale: float = 0.03,
    ):
        super().__init__()
        self.pools = nn.ModuleDict()
        for di, domain in enumerate(DOMAINS):
            for li, level in enumerate(LEVELS):
                self.pools[f"{domain}_{level}"] = PromptPool(
                    level,
                    domain,
                    sizes[level],
                    length,
                    dim,
                    seed=seed * 101 + di * 10 + li,
                    init_scale=init_scale,
                    channels=channels,
                    border=border,
                    image_size=image_size,
                )
        self.histograms: dict[str, np.ndarray] = {k: np.zeros(p.size, dtype=np.int64) for k, p in self.pools.items()}

    def pool(self, domain: str, level: str) -> PromptPool:
        return self.pools[f"{domain}_{level}"]

    def record(self, domain: str, level: str, indices: torch.Tensor) -> None:
        key = f"{domain}_{level}"
        self.histograms[key] += selection_histogram([indices.reshape(-1).tolist()], self.pools[key].size)

    def reset_histograms(self) -> None:
        for h in self.histograms.values():
            h[:] = 0

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class InjectionPlan:
    """Which levels are active and how entries are chosen."""

    levels: tuple[str, ...] = LEVELS
    m: int = 4
    strategy: str = "distribution"
    eps: float = DEFAULT_EPS
    generator: torch.Generator | None = field(default=None, repr=False)

    def active(self, level: str) -> bool:
        return self.m > 0 and level in self.levels
