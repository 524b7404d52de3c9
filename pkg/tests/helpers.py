"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import torch

from geofm.config import BackboneConfig, FusionConfig, ModelConfig, ObjectiveConfig, PretrainConfig, TrainConfig
from geofm.datakit import AugSpec, DatasetSpec, generate_dataset, make_views
from geofm.model import PretrainModel, collate


def micro_config(seed: int = 0, iters: int = 10) -> PretrainConfig:
    """c=8, one block per stage, 2 experts, 2 queries, 2 prototypes."""
    backbone = BackboneConfig(base_dim=8, depths=(1, 1, 1, 1), window_size=4, head_dim=8,
                              n_prompts=2, moe_last_L=2, n_experts=2, top_k=1)
    fusion = FusionConfig(depth=1, head_dim=16, n_prototypes=2)
    objective = ObjectiveConfig(head_hidden=16, head_out=8, head_bottleneck=8, n_queries=2,
                                n_clusters=2, n_classes=3, text_dim=8)
    model = ModelConfig(backbone, fusion, objective, seed=seed)
    aug = AugSpec(n_local=2, ms_seq=2, sar_seq=1)
    data = DatasetSpec(count=4, n_classes=3, ms_size=16, t_ms=3, t_sar=2, seed=seed)
    return PretrainConfig(model, TrainConfig(total_iters=iters, batch_size=2, seed=seed), aug, data)


def micro_batch(cfg: PretrainConfig, model: PretrainModel, seed: int = 0, n: int = 1):
    samples = generate_dataset(cfg.data)[:n]
    rng = np.random.default_rng(seed)
    views = [make_views(s, cfg.aug, rng) for s in samples]
    return collate(views, model.regions(samples))


def routing_margin(model: PretrainModel, batch) -> float:
    """Smallest gap between the selected and the best rejected gate
    probability over every routed token of the student forward."""
    from geofm.backbone import MoEFFN
    from geofm.model import compute_losses

    gaps = []

    def hook(module, args, _out):
        probs = torch.softmax(module.gate(args[0].reshape(-1, args[0].shape[-1])), dim=-1)
        top = torch.sort(probs, dim=-1, descending=True).values
        gaps.append(float((top[:, module.top_k - 1] - top[:, module.top_k]).min()))

    handles = [m.register_forward_hook(hook) for m in model.student.modules() if isinstance(m, MoEFFN)]
    try:
        with torch.no_grad():
            compute_losses(model, batch)
    finally:
        for h in handles:
            h.remove()
    return min(gaps)
