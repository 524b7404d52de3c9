"""Pre-training objectives.

All contrastive terms share one projection head (student) and its EMA copy
(teacher).  The teacher side is always evaluated without gradient: it is
centred and sharpened with a lower temperature, and the student is trained
with the cross-entropy ``-sum_j q_j log p_j`` against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Mlp, RoutingStats, _init_weights
from .errors import NonFiniteError
from .fusion import cosine_matrix, sinkhorn_assign

PROB_FLOOR = 1e-12


class ProjectionHead(nn.Module):
    """Three-layer MLP into an L2-normalised bottleneck, then a bias-free
    prototype layer with unit-norm rows; logits are cosines in [-1, 1]."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, bottleneck: int = 64):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        self.apply(_init_weights)
        self.prototypes = nn.Parameter(torch.randn(out_dim, bottleneck))

    def forward(self, x):
        z = F.normalize(self.mlp(x), dim=-1)
        return z @ F.normalize(self.prototypes, dim=-1).transpose(0, 1)


def head_forward(feature, head: nn.Module, branch: str, tau: float, center=None) -> torch.Tensor:
    logits = head(feature)
    if branch == "teacher":
        if center is not None:
            logits = logits - center
        return torch.softmax(logits / tau, dim=-1)
    if branch == "student":
        return torch.softmax(logits / tau, dim=-1)
    raise ValueError(f"branch must be 'student' or 'teacher', got {branch!r}")


@dataclass
class HeadPair:
    """Student head, teacher head and the teacher centre, plus a tally of the
    teacher logits seen during a step (for the centre update)."""

    student: nn.Module
    teacher: nn.Module
    center: torch.Tensor
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    _logit_sum: torch.Tensor | None = field(default=None, repr=False)
    _logit_count: int = field(default=0, repr=False)

    def student_probs(self, x):
        return head_forward(x, self.student, "student", self.tau_student)

    def student_log_probs(self, x):
        return torch.log_softmax(self.student(x) / self.tau_student, dim=-1)

    @torch.no_grad()
    def teacher_probs(self, x):
        logits = self.teacher(x)
        flat = logits.reshape(-1, logits.shape[-1])
        s = flat.sum(dim=0)
        self._logit_sum = s if self._logit_sum is None else self._logit_sum + s
        self._logit_count += flat.shape[0]
        return torch.softmax((logits - self.center) / self.tau_teacher, dim=-1)

    def batch_center(self):
        if self._logit_count == 0:
            return None
        return self._logit_sum / self._logit_count

    def reset_tally(self):
        self._logit_sum, self._logit_count = None, 0


def loss_cl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of student probabilities ``p`` against the (detached)
    teacher target ``q``; reduces the last axis only."""
    return -(q.detach() * torch.log(p.clamp_min(PROB_FLOOR))).sum(dim=-1)


def loss_cl_log(log_p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """``loss_cl`` from student log-probabilities; exact where ``p`` underflows."""
    return -(q.detach() * log_p).sum(dim=-1)


def entropy(q: torch.Tensor) -> torch.Tensor:
    return -(q * torch.log(q.clamp_min(PROB_FLOOR))).sum(dim=-1)


def contrast(student_feats: torch.Tensor, teacher_feats: torch.Tensor, heads: HeadPair) -> torch.Tensor:
    """Mean ``loss_cl`` over matched rows of two equally shaped feature stacks."""
    return loss_cl_log(heads.student_log_probs(student_feats), heads.teacher_probs(teacher_feats)).mean()


# -- multi-granularity -----------------------------------------------------

def _pair_index(pairs) -> torch.Tensor:
    if isinstance(pairs, torch.Tensor):
        return pairs.long().reshape(-1, 2)
    return torch.as_tensor(list(pairs), dtype=torch.long).reshape(-1, 2)


def loss_pixel(F_s: torch.Tensor, F_t: torch.Tensor, pairs, heads: HeadPair):
    """Pixel-level term for one view pair.

    ``F_s`` (T, N_s, d) student, ``F_t`` (T, N_t, d) teacher, ``pairs`` index
    pairs into the two location axes.  Returns ``(loss, skipped)``; an empty
    correspondence gives ``(0, True)``.
    """
    idx = _pair_index(pairs)
    if idx.numel() == 0:
        return F_s.new_zeros(()), True
    return contrast(F_s[:, idx[:, 0]], F_t[:, idx[:, 1]], heads), False


def cluster_objects(F_pix: torch.Tensor, clusters: torch.Tensor, eps: float = 0.05, iters: int = 3,
                    return_assignment: bool = False):
    """Sinkhorn-cluster ``(..., N_S, d)`` pixel features into ``N_C`` centres.

    Each centre is the assignment-weighted mean of the pixel features
    (``S^T F`` with every column of ``S`` rescaled to sum to one).
    """
    S = sinkhorn_assign(cosine_matrix(F_pix, clusters), eps=eps, iters=iters)
    weights = S / S.sum(dim=-2, keepdim=True)
    centers = weights.transpose(-2, -1) @ F_pix
    return (centers, S) if return_assignment else centers


def loss_object(F_s, F_t, clusters_s, clusters_t, heads: HeadPair, eps=0.05, iters=3):
    """Object-level term; centre ``i`` of the student and teacher clusterings
    (built from matched cluster embeddings) form a pair.  ``F_*``: (..., N, d)."""
    c_s = cluster_objects(F_s, clusters_s, eps, iters)
    with torch.no_grad():
        c_t = cluster_objects(F_t, clusters_t, eps, iters)
    return contrast(c_s, c_t, heads)


def loss_image(F_s, F_t, heads: HeadPair):
    """Image-level term on average-pooled features. ``F_*``: (..., N, d)."""
    return contrast(F_s.mean(dim=-2), F_t.mean(dim=-2), heads)


def loss_fgcl(F_s, F_t, pairs, heads: HeadPair, clusters_s=None, clusters_t=None, eps=0.05, iters=3):
    """pixel + object + image for one ``(T, N, d)`` view pair."""
    total, _ = loss_pixel(F_s, F_t, pairs, heads)
    if clusters_s is not None:
        total = total + loss_object(F_s, F_t, clusters_s, clusters_t, heads, eps, iters)
    return total + loss_image(F_s, F_t, heads)


def loss_mgcl(per_modality: dict, fused) -> torch.Tensor:
    """Sum of per-modality FGCL terms plus the fused-feature FGCL term.

    Arguments are already-evaluated FGCL values; absent modalities add zero.
    """
    terms = [v for v in per_modality.values() if v is not None]
    if fused is not None:
        terms.append(fused)
    if not terms:
        raise ValueError("MGCL needs at least one term")
    return torch.stack([torch.as_tensor(t) for t in terms]).sum()


# -- query aggregation -----------------------------------------------------

class QueryDecoder(nn.Module):
    """Learnable queries cross-attending over a view's features.

    ``h_i = CrossAttn(q_i; F)`` followed by ``z_i = h_i + MLP(LN(h_i))``.
    The query itself is not added back, so ``z`` depends on the view only
    through attention-pooled values.
    """

    def __init__(self, dim: int, n_queries: int = 16, n_heads: int = 1, mlp_ratio: float = 4.0):
        super().__init__()
        if n_queries < 1:
            raise ValueError("need at least one query")
        self.n_heads = n_heads
        self.queries = nn.Parameter(torch.zeros(n_queries, dim))
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.apply(_init_weights)
        nn.init.normal_(self.queries, std=1.0)

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    def forward(self, features: torch.Tensor, return_attn: bool = False):
        """``features`` (B, n, d) -> z (B, m, d) [, attention (B, m, n) averaged over heads]."""
        B, n, d = features.shape
        H = self.n_heads
        hd = d // H
        kv = self.norm_kv(features)
        q = self.q(self.norm_q(self.queries)).view(1, -1, H, hd).transpose(1, 2)
        k = self.k(kv).view(B, n, H, hd).transpose(1, 2)
        v = self.v(kv).view(B, n, H, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)   # (B, H, m, n)
        h = self.out((attn @ v).transpose(1, 2).reshape(B, -1, d))
        z = h + self.mlp(self.norm_mlp(h))
        return (z, attn.mean(dim=1)) if return_attn else z


def qsacl_aggregate(decoder: QueryDecoder, features: torch.Tensor, return_attn: bool = False):
    squeeze = features.dim() == 2
    out = decoder(features.unsqueeze(0) if squeeze else features, return_attn)
    if not squeeze:
        return out
    return (out[0][0], out[1][0]) if return_attn else out[0]


def loss_qsacl(zs_global, zs_local, zt_global, zt_local, heads: HeadPair) -> torch.Tensor:
    """Query-matched global<->local contrast.

    ``z*_global`` (..., 2, m, d) and ``z*_local`` (..., n, m, d); student ``zs``,
    teacher ``zt``.  For each (global g, local l) pair and query i the term is
    ``(L_CL(zs_g,i, zt_l,i) + L_CL(zs_l,i, zt_g,i)) / 2``; the result averages
    over queries, all 2n ordered pairs and leading batch entries.
    """
    ls_g, ls_l = heads.student_log_probs(zs_global), heads.student_log_probs(zs_local)
    pt_g, pt_l = heads.teacher_probs(zt_global), heads.teacher_probs(zt_local)
    # (..., G, 1, m, P) vs (..., 1, L, m, P)
    fwd = loss_cl_log(ls_g.unsqueeze(-3), pt_l.unsqueeze(-4))
    bwd = loss_cl_log(ls_l.unsqueeze(-4), pt_g.unsqueeze(-3))
    return ((fwd + bwd) / 2).mean()


# -- image-text alignment --------------------------------------------------

@dataclass
class TextTable:
    embeddings: torch.Tensor  # (K, D), unit rows, frozen
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def from_array(cls, emb, tau: float = 0.1) -> "TextTable":
        emb = torch.as_tensor(emb)
        return cls(F.normalize(emb, dim=-1), tau)

    @classmethod
    def random(cls, n_classes: int, dim: int, seed: int = 0, tau: float = 0.1) -> "TextTable":
        g = torch.Generator().manual_seed(seed)
        return cls.from_array(torch.randn(n_classes, dim, generator=g), tau)


def loss_ita(features: torch.Tensor, labels: torch.Tensor, table: TextTable) -> torch.Tensor:
    """Mean per-pixel ``-log softmax_j(F_i . T / tau)`` at the pixel's label."""
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    K = table.embeddings.shape[0]
    if labels.numel() and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label ids must lie in [0, {K})")
    logits = features.reshape(-1, features.shape[-1]) @ table.embeddings.to(features).T / table.tau
    return F.cross_entropy(logits, labels)


# -- MoE auxiliary + total -------------------------------------------------

def moe_aux_loss(stats: RoutingStats) -> torch.Tensor:
    """Mean over MoE layers of ``M * sum_i f_i p_i`` (load balancing)."""
    if not stats.layers:
        return torch.zeros(())
    terms = []
    for layer in stats.layers.values():
        if layer.tokens_total <= 0:
            raise ValueError("routing stats carry no tokens")
        M = layer.counts.shape[0]
        terms.append(M * (layer.routed_fraction * layer.mean_gate_prob).sum())
    return torch.stack(terms).mean()


@dataclass
class LossParts:
    mgcl: torch.Tensor
    ita: torch.Tensor
    qsacl: torch.Tensor
    aux: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("mgcl", "ita", "qsacl", "aux")}


def total_loss(parts: LossParts, lambdas=(1.0, 1.0, 1.0), aux_weight: float = 0.01) -> torch.Tensor:
    bad = {k: v for k, v in parts.as_floats().items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteError(f"non-finite loss terms: {sorted(bad)}", diagnostics=parts.as_floats())
    l1, l2, l3 = lambdas
    return l1 * parts.mgcl + l2 * parts.ita + l3 * parts.qsacl + aux_weight * parts.aux
