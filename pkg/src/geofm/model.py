"""Student/teacher model state and the full pre-training loss computation."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, RoutingStats
from .config import MODALITIES, ModelConfig
from .datakit import GeoSample, ViewGeometry, ViewSet, correspondence_array
from .fusion import FusionEncoder, GeoContextAugment, PrototypeBank, region_index
from .objectives import (
    HeadPair, LossParts, ProjectionHead, QueryDecoder, TextTable, contrast, loss_ita,
    loss_object, loss_qsacl, moe_aux_loss, total_loss,
)

STUDENT_ONLY = ("geo.", "ita_proj.")


class Branch(nn.Module):
    """Everything one branch needs to turn views into features and head outputs."""

    def __init__(self, cfg: ModelConfig, student: bool = True):
        super().__init__()
        ob = cfg.objective
        self.backbone = Backbone(cfg.backbone)
        d = self.backbone.out_dim
        self.fusion = FusionEncoder(d, cfg.fusion)
        self.head = ProjectionHead(d, ob.head_hidden, ob.head_out, ob.head_bottleneck)
        self.decoder = QueryDecoder(d, ob.n_queries, ob.decoder_heads)
        self.clusters = nn.Parameter(torch.randn(ob.n_clusters, d))
        if student:
            self.geo = GeoContextAugment(d)
            self.ita_proj = nn.Linear(d, ob.text_dim)

    @property
    def dim(self) -> int:
        return self.backbone.out_dim


class PretrainModel(nn.Module):
    """Named parameter state: student, EMA teacher, prototype bank, teacher
    centre and the frozen class-text table."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ob, fu = cfg.objective, cfg.fusion
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.student = Branch(cfg, student=True)
            gen = torch.Generator().manual_seed(cfg.seed + 1)
            self.bank = PrototypeBank(self.student.dim, fu.n_prototypes, fu.region_rows, fu.region_cols,
                                      fu.proto_momentum, generator=gen)
        self.teacher = Branch(cfg, student=False)
        self.teacher.load_state_dict(self.teacher_view_of_student())
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.register_buffer("center", torch.zeros(ob.head_out))
        self.register_buffer("text", TextTable.random(ob.n_classes, ob.text_dim, seed=cfg.seed + 2).embeddings)

    def teacher_view_of_student(self) -> dict:
        return {k: v for k, v in self.student.state_dict().items() if not k.startswith(STUDENT_ONLY)}

    def teacher_visible_parameters(self):
        """Matching (name -> student param), (name -> teacher param) maps."""
        s = {k: v for k, v in self.student.named_parameters() if not k.startswith(STUDENT_ONLY)}
        t = dict(self.teacher.named_parameters())
        return s, t

    def heads(self) -> HeadPair:
        ob = self.cfg.objective
        return HeadPair(self.student.head, self.teacher.head, self.center, ob.tau_student, ob.tau_teacher)

    def text_table(self) -> TextTable:
        return TextTable(self.text, self.cfg.objective.ita_tau)

    def regions(self, samples) -> list[int]:
        return [region_index(s.lon, s.lat, self.bank) for s in samples]


# -- batching --------------------------------------------------------------

@dataclass
class ViewBatch:
    hr: torch.Tensor          # (B, V, H, W, 3)
    ms: torch.Tensor          # (B, V, T, h, w, 10)
    sar: torch.Tensor         # (B, V, T', h, w, 2)
    ms_days: torch.Tensor     # (B, T)
    sar_days: torch.Tensor    # (B, T')
    labels: torch.Tensor      # (B, V, h, w)

    def to(self, dtype):
        return ViewBatch(self.hr.to(dtype), self.ms.to(dtype), self.sar.to(dtype),
                         self.ms_days, self.sar_days, self.labels)


@dataclass
class PretrainBatch:
    student_global: ViewBatch
    student_local: ViewBatch
    teacher_global: ViewBatch
    teacher_local: ViewBatch
    geometries: list[list[ViewGeometry]]   # per sample: 2 global then n local
    regions: list[int]

    def to(self, dtype):
        return PretrainBatch(self.student_global.to(dtype), self.student_local.to(dtype),
                             self.teacher_global.to(dtype), self.teacher_local.to(dtype),
                             self.geometries, self.regions)


def _stack(arrays) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(arrays)))


def _view_batch(viewsets: list[ViewSet], group: str, branch: str) -> ViewBatch:
    idx_key = f"{branch}_temporal_indices"
    days_key = f"{branch}_days"
    hr, ms, sar, labels, ms_days, sar_days = [], [], [], [], [], []
    for vs in viewsets:
        views = vs.global_views if group == "global" else vs.local_views
        idx = getattr(vs, idx_key)
        days = getattr(vs, days_key)
        hr.append(np.stack([v.hr for v in views]))
        ms.append(np.stack([v.ms[idx["MS"]] for v in views]))
        sar.append(np.stack([v.sar[idx["SAR"]] for v in views]))
        labels.append(np.stack([v.labels for v in views]))
        ms_days.append(days["MS"])
        sar_days.append(days["SAR"])
    return ViewBatch(_stack(hr).float(), _stack(ms).float(), _stack(sar).float(),
                     _stack(ms_days).long(), _stack(sar_days).long(), _stack(labels).long())


def collate(viewsets: list[ViewSet], regions: list[int]) -> PretrainBatch:
    return PretrainBatch(
        _view_batch(viewsets, "global", "student"),
        _view_batch(viewsets, "local", "student"),
        _view_batch(viewsets, "global", "teacher"),
        _view_batch(viewsets, "local", "teacher"),
        [[v.geometry for v in vs.views] for vs in viewsets],
        list(regions),
    )


def sample_batch(samples: list[GeoSample], dtype=torch.float32) -> ViewBatch:
    """Un-augmented full-extent batch (one view per sample, every frame)."""
    return ViewBatch(
        _stack([s.hr_image[None] for s in samples]).to(dtype),
        _stack([s.ms_series[None] for s in samples]).to(dtype),
        _stack([s.sar_series[None] for s in samples]).to(dtype),
        _stack([s.ms_days for s in samples]).long(),
        _stack([s.sar_days for s in samples]).long(),
        _stack([s.labels[None] for s in samples]).long(),
    )


# -- encoding --------------------------------------------------------------

def align_grid(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resample a (N, h, w, d) grid to ``size``: average-pool when shrinking,
    bilinear when growing."""
    if tuple(x.shape[1:3]) == tuple(size):
        return x
    t = x.permute(0, 3, 1, 2)
    if x.shape[1] >= size[0] and x.shape[2] >= size[1]:
        t = F.adaptive_avg_pool2d(t, size)
    else:
        t = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return t.permute(0, 2, 3, 1)


def encode(branch: Branch, vb: ViewBatch, stats: RoutingStats | None = None) -> dict:
    """Backbone every modality of every view, then fuse per location.

    Returns per-modality features ``(B, V, T, h, w, d)`` and ``fused``
    ``(B, V, h, w, d)``; HR features are resampled onto the MS grid if the
    merge flags leave them at a different resolution.
    """
    stats = RoutingStats() if stats is None else stats
    B, V = vb.hr.shape[:2]
    out = {}
    for m, x in (("MS", vb.ms), ("SAR", vb.sar)):
        T = x.shape[2]
        final, _, _ = branch.backbone(x.reshape((B * V * T,) + x.shape[3:]), m, stats)
        out[m] = final.data.reshape((B, V, T) + final.data.shape[1:])
    grid = tuple(out["MS"].shape[3:5])
    final, _, _ = branch.backbone(vb.hr.reshape((B * V,) + vb.hr.shape[2:]), "HR", stats)
    out["HR"] = align_grid(final.data, grid).reshape((B, V, 1) + grid + (final.data.shape[-1],))

    flat = {m: out[m].reshape((B * V,) + out[m].shape[2:]) for m in MODALITIES}
    days = {"MS": vb.ms_days.repeat_interleave(V, dim=0), "SAR": vb.sar_days.repeat_interleave(V, dim=0)}
    fused = branch.fusion(flat, days)
    out["fused"] = fused.reshape((B, V) + fused.shape[1:])
    return out


# -- losses ----------------------------------------------------------------

def _as_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, V, [T,] h, w, d) -> (B, V, T, N, d)."""
    if x.dim() == 5:
        x = x.unsqueeze(2)
    B, V, T, h, w, d = x.shape
    return x.reshape(B, V, T, h * w, d)


def _pixel_rows(S_g, S_l, T_g, geometries, grid_g, grid_l):
    """Gather corresponded student/teacher rows for every (student view,
    other teacher global view) pair."""
    n_local = S_l.shape[1]
    s_rows, t_rows = [], []
    for b, geoms in enumerate(geometries):
        for v in range(2 + n_local):
            for g in (0, 1):
                if v == g:
                    continue
                grid = grid_g if v < 2 else grid_l
                pairs = correspondence_array(geoms[v], geoms[g], grid, grid_g)
                if len(pairs) == 0:
                    continue
                src = S_g[b, v] if v < 2 else S_l[b, v - 2]
                s_rows.append(src[:, pairs[:, 0]].transpose(0, 1))
                t_rows.append(T_g[b, g][:, pairs[:, 1]].transpose(0, 1))
    if not s_rows:
        return None, None
    return torch.cat(s_rows), torch.cat(t_rows)


def fgcl_terms(S_g, S_l, T_g, batch: PretrainBatch, heads: HeadPair, clusters_s, clusters_t,
               eps: float, iters: int) -> dict:
    """pixel / object / image terms for one feature family.

    ``S_g`` (B, 2, T, N, d) and ``S_l`` (B, n, T, N_l, d) student, ``T_g``
    (B, 2, T, N, d) teacher.  Pixel and image terms average over every
    student view paired with the other teacher global view(s); the object
    term uses global/global pairs, whose grids hold at least ``N_C`` cells.
    """
    zero = S_g.new_zeros(())
    grid_g, grid_l = _square(S_g.shape[-2]), _square(S_l.shape[-2])

    s_rows, t_rows = _pixel_rows(S_g, S_l, T_g, batch.geometries, grid_g, grid_l)
    pix = contrast(s_rows, t_rows, heads) if s_rows is not None else zero

    T_swap = T_g.flip(1)
    if S_g.shape[-2] >= clusters_s.shape[0]:
        obj = loss_object(S_g, T_swap, clusters_s, clusters_t, heads, eps, iters)
    else:
        obj = zero

    pg, pl, tg = S_g.mean(-2), S_l.mean(-2), T_g.mean(-2)
    n_local = pl.shape[1]
    s_img = torch.cat([pg.reshape(-1, pg.shape[-1]),
                       pl.unsqueeze(2).expand(-1, -1, 2, -1, -1).reshape(-1, pl.shape[-1])])
    t_img = torch.cat([tg.flip(1).reshape(-1, tg.shape[-1]),
                       tg.unsqueeze(1).expand(-1, n_local, -1, -1, -1).reshape(-1, tg.shape[-1])])
    img = contrast(s_img, t_img, heads)
    return {"pixel": pix, "object": obj, "image": img}


def _square(n: int) -> tuple[int, int]:
    side = int(round(n ** 0.5))
    if side * side != n:
        raise ValueError(f"token count {n} is not a square grid")
    return side, side


def compute_losses(model: PretrainModel, batch: PretrainBatch):
    """Forward both branches and evaluate every pre-training term.

    Returns ``(LossParts, total, extras)``; ``extras`` carries the raw student
    fused global features (for the prototype update), the routing stats and
    the per-level MGCL breakdown.
    """
    cfg = model.cfg
    ob, fu = cfg.objective, cfg.fusion
    heads = model.heads()
    stats = RoutingStats()
    student, teacher = model.student, model.teacher

    sg = encode(student, batch.student_global, stats)
    sl = encode(student, batch.student_local, stats)
    with torch.no_grad():
        tg = encode(teacher, batch.teacher_global)
        tl = encode(teacher, batch.teacher_local)

    B = batch.student_global.hr.shape[0]
    protos = model.bank.prototypes[torch.as_tensor(batch.regions, dtype=torch.long)].to(sg["fused"])

    def geo(fused):
        V = fused.shape[1]
        flat = fused.reshape((B * V,) + fused.shape[2:])
        return student.geo(flat, protos.repeat_interleave(V, dim=0)).reshape(fused.shape)

    fused_g, fused_l = geo(sg["fused"]), geo(sl["fused"])

    breakdown = {}
    mgcl = sg["fused"].new_zeros(())
    families = {m: (sg[m], sl[m], tg[m]) for m in MODALITIES}
    families["fused"] = (fused_g, fused_l, tg["fused"])
    for name, (S_g, S_l, T_g) in families.items():
        terms = fgcl_terms(_as_tokens(S_g), _as_tokens(S_l), _as_tokens(T_g), batch, heads,
                           student.clusters, teacher.clusters, fu.sinkhorn_eps, fu.sinkhorn_iters)
        breakdown[name] = {k: float(v.detach()) for k, v in terms.items()}
        mgcl = mgcl + terms["pixel"] + terms["object"] + terms["image"]

    labels = batch.student_global.labels
    proj = F.normalize(student.ita_proj(fused_g), dim=-1)                 # (B, 2, h, w, D)
    proj = _upsample_to(proj, labels.shape[-2:])
    ita = loss_ita(proj, labels, model.text_table())

    def aggregate(decoder, fused):
        V = fused.shape[1]
        z = decoder(fused.reshape(B * V, -1, fused.shape[-1]))
        return z.reshape(B, V, z.shape[1], z.shape[2])

    zs_g, zs_l = aggregate(student.decoder, fused_g), aggregate(student.decoder, fused_l)
    with torch.no_grad():
        zt_g, zt_l = aggregate(teacher.decoder, tg["fused"]), aggregate(teacher.decoder, tl["fused"])
    qsacl = loss_qsacl(zs_g, zs_l, zt_g, zt_l, heads)

    aux = moe_aux_loss(stats).to(mgcl)
    parts = LossParts(mgcl, ita, qsacl, aux)
    total = total_loss(parts, (ob.lambda_mgcl, ob.lambda_ita, ob.lambda_qsacl), ob.aux_weight)
    extras = {"fused_global": sg["fused"].detach(), "stats": stats, "heads": heads, "mgcl_breakdown": breakdown}
    return parts, total, extras


def _upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    """Nearest upsampling of (..., h, w, D) onto an integer multiple grid."""
    h, w = x.shape[-3:-1]
    H, W = size
    if (H, W) == (h, w):
        return x
    if H % h or W % w:
        lead = x.shape[:-3]
        t = x.reshape((-1, h, w, x.shape[-1])).permute(0, 3, 1, 2)
        t = F.interpolate(t, size=(H, W), mode="nearest").permute(0, 2, 3, 1)
        return t.reshape(lead + (H, W, x.shape[-1]))
    return x.repeat_interleave(H // h, dim=-3).repeat_interleave(W // w, dim=-2)


def clone_model(model: PretrainModel) -> PretrainModel:
    return copy.deepcopy(model)
