"""Optimisation loop: cosine schedules, AdamW, clipping, EMA teacher, GCPL updates."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import PretrainConfig, TrainConfig
from .datakit import GeoSample, make_views
from .errors import NonFiniteError
from .fusion import gcpl_update
from .model import PretrainBatch, PretrainModel, collate, compute_losses

log = logging.getLogger(__name__)

NO_DECAY_KEYS = ("prompts.", "gate", "clusters", "modality_embed", "queries", "logit_scale", "rel_bias")


def cosine_schedule(t: int, total: int, start: float, end: float) -> float:
    """Half-cosine from ``start`` (t=0) to ``end`` (t=total)."""
    if total <= 0:
        return start
    t = min(max(t, 0), total)
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass(frozen=True)
class Schedules:
    total: int
    lr: tuple[float, float] = (2e-4, 1e-6)
    wd: tuple[float, float] = (0.04, 0.2)
    momentum: tuple[float, float] = (0.996, 1.0)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Schedules":
        return cls(cfg.total_iters, (cfg.lr_start, cfg.lr_end), (cfg.wd_start, cfg.wd_end),
                   (cfg.ema_start, cfg.ema_end))

    def at(self, t: int) -> dict:
        return {"lr": cosine_schedule(t, self.total, *self.lr),
                "wd": cosine_schedule(t, self.total, *self.wd),
                "momentum": cosine_schedule(t, self.total, *self.momentum)}


@torch.no_grad()
def ema_update(student: dict, teacher: dict, momentum: float) -> None:
    """``theta_t <- m * theta_t + (1 - m) * theta_s`` over matching names."""
    if student.keys() != teacher.keys():
        missing = sorted(set(student) ^ set(teacher))
        raise KeyError(f"student/teacher parameter names differ: {missing[:5]}")
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(t.shape)}")
        t.copy_(t * momentum + s * (1.0 - momentum))


def clip_gradients(named_params, max_norm: float) -> float:
    """Scale gradients to a global L2 norm of at most ``max_norm``.

    Returns the pre-clipping norm; raises ``NonFiniteError`` naming the
    offending tensors if any gradient is NaN/inf.
    """
    named = [(n, p) for n, p in named_params if p.grad is not None]
    bad = [n for n, p in named if not torch.isfinite(p.grad).all()]
    if bad:
        raise NonFiniteError(f"non-finite gradient in {', '.join(bad[:5])}", {"parameters": bad})
    if not named:
        return 0.0
    norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for _, p in named]))
    scale = max_norm / (float(norm) + 1e-6)
    if scale < 1.0:
        for _, p in named:
            p.grad.mul_(scale)
    return float(norm)


def param_groups(model: PretrainModel) -> list[dict]:
    decay, no_decay = [], []
    for name, p in model.student.named_parameters():
        if not p.requires_grad:
            continue
        if p.dim() <= 1 or any(k in name for k in NO_DECAY_KEYS):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "decay": True}, {"params": no_decay, "decay": False, "weight_decay": 0.0}]


def make_optimizer(model: PretrainModel, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(param_groups(model), lr=cfg.lr_start, weight_decay=cfg.wd_start,
                             betas=(cfg.beta1, cfg.beta2))


@torch.no_grad()
def update_center(model: PretrainModel, batch_center, momentum: float) -> None:
    if batch_center is not None:
        model.center.copy_(model.center * momentum + batch_center * (1.0 - momentum))


@torch.no_grad()
def update_prototypes(model: PretrainModel, fused_global: torch.Tensor, regions) -> None:
    """One GCPL step per sample from its (pre-augmentation) fused global views."""
    fu = model.cfg.fusion
    for b, region in enumerate(regions):
        feats = fused_global[b].reshape(-1, fused_global.shape[-1])
        gcpl_update(feats, region, model.bank, fu.sinkhorn_eps, fu.sinkhorn_iters)


def train_step(model: PretrainModel, optimizer, batch: PretrainBatch, t: int,
               schedules: Schedules, clip_norm: float) -> dict:
    sched = schedules.at(t)
    for group in optimizer.param_groups:
        group["lr"] = sched["lr"]
        if group.get("decay", True):
            group["weight_decay"] = sched["wd"]

    optimizer.zero_grad(set_to_none=True)
    parts, total, extras = compute_losses(model, batch)
    total.backward()
    grad_norm = clip_gradients(model.student.named_parameters(), clip_norm)
    optimizer.step()

    ema_update(*model.teacher_visible_parameters(), sched["momentum"])
    update_center(model, extras["heads"].batch_center(), model.cfg.objective.center_momentum)
    update_prototypes(model, extras["fused_global"], batch.regions)

    return {"iter": t, "loss": float(total.detach()), **parts.as_floats(), "grad_norm": grad_norm, **sched}


def batch_indices(seed: int, t: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, t])
    return rng.choice(n, size=min(batch_size, n), replace=False)


def build_batch(model: PretrainModel, samples: list[GeoSample], cfg: PretrainConfig, t: int) -> PretrainBatch:
    idx = batch_indices(cfg.train.seed, t, len(samples), cfg.train.batch_size)
    chosen = [samples[i] for i in idx]
    viewsets = [make_views(s, cfg.aug, np.random.default_rng([cfg.train.seed, t, b]))
                for b, s in enumerate(chosen)]
    return collate(viewsets, model.regions(chosen))


@dataclass
class Pretrainer:
    cfg: PretrainConfig
    model: PretrainModel | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.model is None:
            self.model = PretrainModel(self.cfg.model)
        self.cfg.train.validate()
        self.optimizer = make_optimizer(self.model, self.cfg.train)
        self.schedules = Schedules.from_config(self.cfg.train)

    def fit(self, samples: list[GeoSample], iters: int | None = None, metrics_path=None,
            callback=None) -> list[dict]:
        iters = self.cfg.train.total_iters if iters is None else iters
        sink = open(metrics_path, "a") if metrics_path else None
        try:
            for t in range(len(self.history), len(self.history) + iters):
                tick = time.perf_counter()
                batch = build_batch(self.model, samples, self.cfg, t)
                row = train_step(self.model, self.optimizer, batch, t, self.schedules, self.cfg.train.clip_norm)
                row["seconds"] = time.perf_counter() - tick
                self.history.append(row)
                if sink:
                    sink.write(json.dumps(row) + "\n")
                    sink.flush()
                if callback:
                    callback(self, row)
                log.info("iter %d loss %.4f (%.2fs)", t, row["loss"], row["seconds"])
        finally:
            if sink:
                sink.close()
        return self.history


def moving_average(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError(f"need at least {window} values")
    return np.convolve(v, np.ones(window) / window, mode="valid")


def save_metrics(rows, path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows))
