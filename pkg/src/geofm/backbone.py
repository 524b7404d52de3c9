"""Unified hierarchical encoder shared by the HR, MS and SAR modalities.

Four stages: two SwinV2-style window-attention stages followed by two
global-attention stages.  Adaptive Patch Merging sits in front of stages
2-4 and either merges 2x2 token blocks or keeps the resolution, per
modality.  Stages 3 and 4 prepend learnable per-modality prompt tokens that
are dropped again at the end of the stage, and the last ``moe_last_L``
blocks swap their MLP for a top-k mixture of experts.

Tensors are channels-last: token grids are ``(B, h, w, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import IN_CHANNELS, MODALITIES, PATCH_SIZE, BackboneConfig


@dataclass
class TokenGrid:
    data: torch.Tensor  # (B, h, w, d)
    modality: str
    stride: int

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.data.shape[1:3])

    @property
    def dim(self) -> int:
        return self.data.shape[-1]


@dataclass
class LayerRouting:
    counts: torch.Tensor          # (M,) tokens routed to each expert
    gate_prob_sum: torch.Tensor   # (M,) summed gate probabilities, differentiable
    tokens_total: int
    top_k: int

    @property
    def mean_gate_prob(self) -> torch.Tensor:
        return self.gate_prob_sum / self.tokens_total

    @property
    def routed_fraction(self) -> torch.Tensor:
        return self.counts.to(self.gate_prob_sum.dtype) / (self.tokens_total * self.top_k)


@dataclass
class RoutingStats:
    layers: dict[str, LayerRouting] = field(default_factory=dict)

    def record(self, name: str, counts, gate_prob_sum, tokens: int, top_k: int) -> None:
        if name in self.layers:
            prev = self.layers[name]
            self.layers[name] = LayerRouting(prev.counts + counts, prev.gate_prob_sum + gate_prob_sum,
                                             prev.tokens_total + tokens, top_k)
        else:
            self.layers[name] = LayerRouting(counts, gate_prob_sum, tokens, top_k)

    def merge(self, other: "RoutingStats") -> "RoutingStats":
        for name, layer in other.layers.items():
            self.record(name, layer.counts, layer.gate_prob_sum, layer.tokens_total, layer.top_k)
        return self

    def summary(self) -> dict:
        return {
            name: {"counts": layer.counts.tolist(), "tokens": layer.tokens_total,
                   "mean_gate_prob": [round(p, 6) for p in layer.mean_gate_prob.detach().tolist()]}
            for name, layer in self.layers.items()
        }


# -- tokenizer / APM -------------------------------------------------------

class PatchTokenizer(nn.Module):
    """Non-overlapping 4x4 patches -> linear embedding."""

    def __init__(self, in_channels: int, dim: int, patch: int = PATCH_SIZE):
        super().__init__()
        self.in_channels = in_channels
        self.patch = patch
        self.proj = nn.Linear(in_channels * patch * patch, dim)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        p = self.patch
        if C != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {C}")
        if H % p or W % p:
            raise ValueError(f"spatial dims {(H, W)} not divisible by patch size {p}")
        x = x.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, H // p, W // p, p * p * C)

    def forward(self, x):
        return self.proj(self.patchify(x))


class AdaptivePatchMerging(nn.Module):
    """2x2 merge through ``W: 4d -> 2d``, or a resolution-keeping projection.

    The non-merging path uses ``W'`` = mean of the four ``d``-column blocks
    of ``W`` (bias shared), so a constant 2x2 block maps to exactly four
    times the non-merged response when the bias is zero.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.reduction = nn.Linear(4 * dim, 2 * dim)

    def projection_weight(self) -> torch.Tensor:
        d = self.dim
        return self.reduction.weight.view(2 * d, 4, d).mean(dim=1)

    def forward(self, x: torch.Tensor, merge: bool) -> torch.Tensor:
        if not merge:
            return F.linear(x, self.projection_weight(), self.reduction.bias)
        B, h, w, d = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"cannot merge an odd grid {(h, w)}")
        x0 = x[:, 0::2, 0::2]
        x1 = x[:, 1::2, 0::2]
        x2 = x[:, 0::2, 1::2]
        x3 = x[:, 1::2, 1::2]
        return self.reduction(torch.cat([x0, x1, x2, x3], dim=-1))


# -- feed-forward ----------------------------------------------------------

class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, stats=None):
        return self.fc2(F.gelu(self.fc1(x)))


def top_k_lowest_index(probs: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest entries per row; ties go to the lower index."""
    return torch.argsort(-probs, dim=-1, stable=True)[..., :k]


class MoEFFN(nn.Module):
    """Softmax-gated mixture of MLP experts, top-k routing.

    ``out = sum_{i in topk} G_i(x) * E_i(x)`` with ``G = softmax(W x)`` over
    all experts (the selected gates are not renormalised).
    """

    def __init__(self, dim: int, hidden: int, n_experts: int, top_k: int, name: str = "moe"):
        super().__init__()
        if not 1 <= top_k <= n_experts:
            raise ValueError("need 1 <= top_k <= n_experts")
        self.name = name
        self.top_k = top_k
        self.gate = nn.Linear(dim, n_experts, bias=False)
        self.experts = nn.ModuleList(Mlp(dim, hidden) for _ in range(n_experts))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def route(self, x: torch.Tensor):
        probs = torch.softmax(self.gate(x), dim=-1)
        return probs, top_k_lowest_index(probs, self.top_k)

    def forward(self, x: torch.Tensor, stats: RoutingStats | None = None) -> torch.Tensor:
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        probs, chosen = self.route(flat)
        out = torch.zeros_like(flat)
        for e, expert in enumerate(self.experts):
            token_idx = (chosen == e).any(dim=-1).nonzero(as_tuple=True)[0]
            if token_idx.numel() == 0:
                continue
            gated = probs[token_idx, e].unsqueeze(-1) * expert(flat[token_idx])
            out = out.index_add(0, token_idx, gated)
        if stats is not None:
            counts = torch.bincount(chosen.reshape(-1), minlength=self.n_experts)
            stats.record(self.name, counts, probs.sum(dim=0), flat.shape[0], self.top_k)
        return out.reshape(shape)


def moe_ffn(tokens: torch.Tensor, layer: MoEFFN):
    """Functional form: ``(n, d)`` tokens -> (output, RoutingStats)."""
    stats = RoutingStats()
    return layer(tokens, stats), stats


def make_ffn(cfg: BackboneConfig, dim: int, use_moe: bool, name: str) -> nn.Module:
    hidden = int(dim * cfg.mlp_ratio)
    if use_moe:
        return MoEFFN(dim, hidden, cfg.n_experts, cfg.top_k, name=name)
    return Mlp(dim, hidden)


# -- SwinV2 window attention -----------------------------------------------

def window_partition(x: torch.Tensor, wh: int, ww: int) -> torch.Tensor:
    B, H, W, C = x.shape
    x = x.view(B, H // wh, wh, W // ww, ww, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, wh * ww, C)


def window_reverse(windows: torch.Tensor, wh: int, ww: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // wh, W // ww, wh, ww, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, H, W, C)


class WindowAttention(nn.Module):
    """Scaled cosine attention with per-head learned temperature and a
    relative position bias table."""

    max_logit_scale = math.log(100.0)

    def __init__(self, dim: int, n_heads: int, window_size: int):
        super().__init__()
        self.n_heads = n_heads
        self.window_size = window_size
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(torch.full((n_heads,), math.log(10.0)))
        self.rel_bias = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, n_heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)

    def relative_index(self, wh: int, ww: int, device=None) -> torch.Tensor:
        coords = torch.stack(torch.meshgrid(torch.arange(wh), torch.arange(ww), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]
        span = 2 * self.window_size - 1
        idx = (rel[0] + self.window_size - 1) * span + (rel[1] + self.window_size - 1)
        return idx.to(device)

    def forward(self, x: torch.Tensor, wh: int, ww: int, mask: torch.Tensor | None = None):
        n_win, N, C = x.shape
        hd = C // self.n_heads
        qkv = self.qkv(x).view(n_win, N, 3, self.n_heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = F.normalize(q, dim=-1, eps=1e-6) @ F.normalize(k, dim=-1, eps=1e-6).transpose(-2, -1)
        scale = torch.clamp(self.logit_scale, max=self.max_logit_scale).exp()
        attn = attn * scale.view(1, -1, 1, 1)
        bias = self.rel_bias[self.relative_index(wh, ww, x.device).reshape(-1)]
        attn = attn + bias.view(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            # mask: (windows per image, N, N) bool, True where attention is blocked
            n_img = mask.shape[0]
            attn = attn.view(-1, n_img, self.n_heads, N, N)
            attn = attn.masked_fill(mask[None, :, None], float("-inf")).view(n_win, self.n_heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n_win, N, C)
        return self.proj(out)


def _window_mask(H, W, h, w, wh, ww, sh, sw, device) -> torch.Tensor | None:
    """Blocked-attention mask for padded and/or shifted windows."""
    if (H, W) == (h, w) and sh == 0 and sw == 0:
        return None
    label = torch.zeros(H, W, dtype=torch.long)
    if sh or sw:
        row_slices = (slice(0, -wh), slice(-wh, -sh), slice(-sh, None)) if sh else (slice(None),)
        col_slices = (slice(0, -ww), slice(-ww, -sw), slice(-sw, None)) if sw else (slice(None),)
        region = 0
        for rs in row_slices:
            for cs in col_slices:
                label[rs, cs] = region
                region += 1
    pad = torch.ones(H, W, dtype=torch.long)
    pad[:h, :w] = 0
    pad = torch.roll(pad, shifts=(-sh, -sw), dims=(0, 1))
    label = label * 2 + pad
    windows = window_partition(label.view(1, H, W, 1), wh, ww).squeeze(-1)
    return (windows[:, :, None] != windows[:, None, :]).to(device)


class SwinV2Block(nn.Module):
    """Window attention + MLP with residual post-normalisation."""

    def __init__(self, dim: int, n_heads: int, window_size: int, ffn: nn.Module):
        super().__init__()
        self.window_size = window_size
        self.attn = WindowAttention(dim, n_heads, window_size)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = ffn
        self.norm2 = nn.LayerNorm(dim)

    def attention(self, x: torch.Tensor, shift: bool) -> torch.Tensor:
        B, h, w, C = x.shape
        ws = self.window_size
        wh, ww = min(ws, h), min(ws, w)
        sh = wh // 2 if shift and h > ws else 0
        sw = ww // 2 if shift and w > ws else 0
        H, W = math.ceil(h / wh) * wh, math.ceil(w / ww) * ww
        if (H, W) != (h, w):
            x = F.pad(x, (0, 0, 0, W - w, 0, H - h))
        if sh or sw:
            x = torch.roll(x, shifts=(-sh, -sw), dims=(1, 2))
        mask = _window_mask(H, W, h, w, wh, ww, sh, sw, x.device)
        out = self.attn(window_partition(x, wh, ww), wh, ww, mask)
        out = window_reverse(out, wh, ww, H, W)
        if sh or sw:
            out = torch.roll(out, shifts=(sh, sw), dims=(1, 2))
        return out[:, :h, :w]

    def forward(self, x: torch.Tensor, shift: bool = False, stats: RoutingStats | None = None):
        x = x + self.norm1(self.attention(x, shift))
        return x + self.norm2(self.ffn(x, stats))


def swinv2_block(tokens: TokenGrid, block: SwinV2Block, shift: bool = False) -> TokenGrid:
    return TokenGrid(block(tokens.data, shift), tokens.modality, tokens.stride)


# -- global attention ------------------------------------------------------

class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.n_heads, C // self.n_heads).permute(2, 0, 3, 1, 4).unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class TransformerBlock(nn.Module):
    """Pre-norm global self-attention block over a token sequence."""

    def __init__(self, dim: int, n_heads: int, ffn: nn.Module):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = ffn

    def forward(self, x, stats: RoutingStats | None = None):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x), stats)


def transformer_block(tokens: torch.Tensor, block: TransformerBlock, stats=None) -> torch.Tensor:
    return block(tokens, stats)


# -- the backbone ----------------------------------------------------------

class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = cfg.dims
        self.tokenizers = nn.ModuleDict({m: PatchTokenizer(IN_CHANNELS[m], dims[0]) for m in MODALITIES})
        self.apm = nn.ModuleList(AdaptivePatchMerging(dims[j]) for j in range(3))

        total = sum(cfg.depths)
        first_moe = total - cfg.moe_last_L
        self.stages = nn.ModuleList()
        g = 0
        for s, depth in enumerate(cfg.depths):
            dim, heads = dims[s], cfg.heads(dims[s])
            blocks = nn.ModuleList()
            for b in range(depth):
                ffn = make_ffn(cfg, dim, g >= first_moe, name=f"stage{s + 1}.block{b}")
                if s < 2:
                    blocks.append(SwinV2Block(dim, heads, cfg.window_size, ffn))
                else:
                    blocks.append(TransformerBlock(dim, heads, ffn))
                g += 1
            self.stages.append(blocks)
        self.prompts = nn.ParameterDict()
        if cfg.n_prompts > 0:
            for m in MODALITIES:
                for s in (2, 3):
                    p = nn.Parameter(torch.zeros(cfg.n_prompts, dims[s]))
                    nn.init.trunc_normal_(p, std=0.02)
                    self.prompts[f"{m}_stage{s + 1}"] = p
        self.norm = nn.LayerNorm(dims[3])
        self.apply(_init_weights)

    @property
    def out_dim(self) -> int:
        return self.cfg.dims[3]

    def tokenize(self, x: torch.Tensor, modality: str) -> TokenGrid:
        if modality not in self.tokenizers:
            raise ValueError(f"unknown modality {modality!r}")
        return TokenGrid(self.tokenizers[modality](x), modality, PATCH_SIZE)

    def _global_stage(self, s: int, x: torch.Tensor, modality: str, stats) -> torch.Tensor:
        B, h, w, d = x.shape
        seq = x.reshape(B, h * w, d)
        key = f"{modality}_stage{s + 1}"
        n = 0
        if key in self.prompts:
            prompts = self.prompts[key]
            n = prompts.shape[0]
            seq = torch.cat([prompts.unsqueeze(0).expand(B, -1, -1), seq], dim=1)
        for block in self.stages[s]:
            seq = block(seq, stats)
        return seq[:, n:].reshape(B, h, w, d)

    def forward(self, x: torch.Tensor, modality: str, stats: RoutingStats | None = None):
        """``x`` (B, H, W, C) -> (final TokenGrid, per-stage TokenGrids, RoutingStats)."""
        stats = RoutingStats() if stats is None else stats
        grid = self.tokenize(x, modality)
        t, stride = grid.data, grid.stride
        merges = self.cfg.apm_merge[modality]
        stages = []
        for s in range(4):
            if s > 0:
                t = self.apm[s - 1](t, bool(merges[s - 1]))
                stride *= 2 if merges[s - 1] else 1
            if s < 2:
                for b, block in enumerate(self.stages[s]):
                    t = block(t, shift=(b % 2 == 1), stats=stats)
            else:
                t = self._global_stage(s, t, modality, stats)
            if s == 3:
                t = self.norm(t)
            stages.append(TokenGrid(t, modality, stride))
        return stages[-1], stages, stats


def forward_backbone(x, modality, backbone: Backbone, stats=None):
    return backbone(x, modality, stats)


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
