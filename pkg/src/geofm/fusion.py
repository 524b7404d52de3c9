"""Multi-modal temporal fusion and geo-context prototype learning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Mlp, TransformerBlock, _init_weights
from .config import MODALITIES, FusionConfig

DAYS_PER_YEAR = 365


@dataclass
class FusedFeature:
    data: torch.Tensor                  # (B, h, w, d)
    modalities: tuple[str, ...]
    temporal_lengths: dict[str, int]


def day_encoding(days: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of day-of-year, ``(..., T) -> (..., T, dim)``."""
    doy = torch.remainder(days.to(torch.float64), DAYS_PER_YEAR)
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angle = doy.unsqueeze(-1) * freq
    enc = torch.zeros(days.shape + (dim,), dtype=torch.float64)
    enc[..., 0:2 * half:2] = torch.sin(angle)
    enc[..., 1:2 * half:2] = torch.cos(angle)
    return enc


class FusionEncoder(nn.Module):
    """Transformer over the per-location (modality x time) token sequence.

    Each location sees ``[HR] + [MS_1..MS_T] + [SAR_1..SAR_T']``, every token
    shifted by a learned modality embedding and (for dated frames) a
    sinusoidal day-of-year code; the encoder output is mean-pooled over the
    sequence.
    """

    def __init__(self, dim: int, cfg: FusionConfig):
        super().__init__()
        self.dim = dim
        heads = max(1, dim // cfg.head_dim)
        self.modality_embed = nn.ParameterDict(
            {m: nn.Parameter(torch.zeros(dim)) for m in MODALITIES})
        for p in self.modality_embed.values():
            nn.init.trunc_normal_(p, std=0.02)
        self.layers = nn.ModuleList(
            TransformerBlock(dim, heads, Mlp(dim, int(dim * cfg.mlp_ratio))) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(dim) if cfg.depth > 0 else nn.Identity()
        self.apply(_init_weights)

    def forward(self, grids: dict[str, torch.Tensor], days: dict[str, torch.Tensor] | None = None):
        """``grids[m]``: (B, T, h, w, d); ``days[m]``: (B, T).  Returns (B, h, w, d)."""
        days = days or {}
        present = [m for m in MODALITIES if m in grids]
        if not present:
            raise ValueError("fusion needs at least one modality")
        B, _, h, w, d = grids[present[0]].shape
        parts = []
        for m in present:
            g = grids[m]
            if g.shape[0] != B or g.shape[2:4] != (h, w):
                raise ValueError(f"grid mismatch: {m} has {tuple(g.shape[2:4])}, expected {(h, w)}")
            tok = g + self.modality_embed[m]
            if m in days:
                enc = day_encoding(days[m], d).to(g)
                tok = tok + enc[:, :, None, None, :]
            parts.append(tok.permute(0, 2, 3, 1, 4).reshape(B * h * w, g.shape[1], d))
        seq = torch.cat(parts, dim=1)
        for layer in self.layers:
            seq = layer(seq)
        seq = self.norm(seq)
        return seq.mean(dim=1).reshape(B, h, w, d)


def fuse(encoder: FusionEncoder, features: dict[str, torch.Tensor], day_offsets=None) -> FusedFeature:
    data = encoder(features, day_offsets)
    return FusedFeature(data, tuple(m for m in MODALITIES if m in features),
                        {m: features[m].shape[1] for m in features})


# -- Sinkhorn --------------------------------------------------------------

def sinkhorn_assign(M: torch.Tensor, eps: float = 0.05, iters: int = 3, tol: float | None = None) -> torch.Tensor:
    """Entropic transport plan with uniform marginals.

    ``S = diag(u) exp(M / eps) diag(v)`` with rows summing to ``1/n`` and
    columns to ``1/p``.  Runs ``iters`` alternating row/column scalings in
    the log domain (checking every 16 sweeps whether the row error is below
    ``tol`` and stopping early if so).
    Leading batch dimensions are supported; gradients flow through.
    """
    if not torch.isfinite(M).all():
        raise ValueError("similarity matrix has non-finite entries")
    if eps <= 0 or iters < 1:
        raise ValueError("need eps > 0 and iters >= 1")
    n, p = M.shape[-2:]
    log_k = M / eps
    log_r = -math.log(n)
    log_c = -math.log(p)
    v = torch.zeros(M.shape[:-2] + (1, p), dtype=M.dtype, device=M.device)
    for i in range(iters):
        u = log_r - torch.logsumexp(log_k + v, dim=-1, keepdim=True)
        v = log_c - torch.logsumexp(log_k + u, dim=-2, keepdim=True)
        if tol is not None and i % 16 == 15:
            rows = torch.logsumexp(log_k + u + v, dim=-1).exp()
            if (rows - 1.0 / n).abs().max() < tol:
                break
    S = torch.exp(log_k + u + v)
    # a constant matrix has the uniform plan as its closed-form answer; take it
    # exactly rather than up to rounding
    flat = (M == M[..., :1, :1]).flatten(-2).all(dim=-1)[..., None, None]
    return torch.where(flat, torch.full_like(S, 1.0 / (n * p)), S)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    a = a / a.norm(dim=-1, keepdim=True).clamp_min(eps)
    b = b / b.norm(dim=-1, keepdim=True).clamp_min(eps)
    return a @ b.transpose(-2, -1)


# -- geo-context prototypes ------------------------------------------------

class PrototypeBank(nn.Module):
    """Per-region prototype sets on an equirectangular lon/lat grid."""

    def __init__(self, dim: int, n_prototypes: int = 8, rows: int = 64, cols: int = 64,
                 momentum: float = 0.99, generator: torch.Generator | None = None):
        super().__init__()
        if not 0 <= momentum < 1:
            raise ValueError("prototype momentum must lie in [0, 1)")
        self.momentum = momentum
        protos = torch.randn(rows * cols, n_prototypes, dim, generator=generator)
        self.register_buffer("prototypes", F.normalize(protos, dim=-1))
        self.register_buffer("grid", torch.tensor([rows, cols], dtype=torch.long))

    @property
    def n_regions(self) -> int:
        return self.prototypes.shape[0]

    @property
    def rows(self) -> int:
        return int(self.grid[0])

    @property
    def cols(self) -> int:
        return int(self.grid[1])


def region_index(lon: float, lat: float, bank: PrototypeBank) -> int:
    if not (-180.0 <= lon < 180.0) or not (-90.0 <= lat < 90.0):
        raise ValueError(f"coordinates out of range: lon={lon}, lat={lat}")
    row = min(int((lat + 90.0) / 180.0 * bank.rows), bank.rows - 1)
    col = min(int((lon + 180.0) / 360.0 * bank.cols), bank.cols - 1)
    return row * bank.cols + col


@torch.no_grad()
def gcpl_update(features: torch.Tensor, region: int, bank: PrototypeBank,
                eps: float = 0.05, iters: int = 3, momentum: float | None = None) -> PrototypeBank:
    """EMA-update one region's prototypes from a sample's ``(N_S, d)`` fused features."""
    m = bank.momentum if momentum is None else momentum
    feats = features.reshape(-1, features.shape[-1]).to(bank.prototypes.dtype)
    protos = bank.prototypes[region]
    S = sinkhorn_assign(cosine_matrix(feats, protos), eps=eps, iters=iters)
    target = S.transpose(0, 1) @ feats
    bank.prototypes[region] = m * protos + (1.0 - m) * target
    return bank


class GeoContextAugment(nn.Module):
    """Single-head cross-attention from locations to the region's prototypes,
    added back residually."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor, prototypes: torch.Tensor, return_attn: bool = False):
        """``x`` (B, h, w, d), ``prototypes`` (B, N_p, d)."""
        B, h, w, d = x.shape
        q = self.q(x.reshape(B, h * w, d))
        k = self.k(prototypes)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(d), dim=-1)
        y = x + self.out(attn @ self.v(prototypes)).reshape(B, h, w, d)
        return (y, attn) if return_attn else y


def gcpl_augment(fused: torch.Tensor, regions, bank: PrototypeBank, module: GeoContextAugment) -> torch.Tensor:
    protos = bank.prototypes[torch.as_tensor(regions, dtype=torch.long)].to(fused)
    return module(fused, protos)
