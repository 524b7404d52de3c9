"""
Backbone grids and expert routing
=================================

Every modality lands on the same final grid. The HR branch gets there by
merging patches, and switching merges off keeps it finer.
"""

import torch

from geofm.backbone import Backbone, MoEFFN, moe_ffn
from geofm.config import APM_ABLATION, BackboneConfig
from geofm.objectives import moe_aux_loss

torch.manual_seed(0)
small = dict(base_dim=8, depths=(1, 1, 1, 1), moe_last_L=1)

with torch.no_grad():
    bb = Backbone(BackboneConfig(**small))
    hr, _, _ = bb(torch.rand(1, 512, 512, 3), "HR")
    ms, _, _ = bb(torch.rand(1, 64, 64, 10), "MS")
    print("HR final grid", hr.grid, "stride", hr.stride)
    print("MS final grid", ms.grid, "stride", ms.stride)

    for name, flags in APM_ABLATION.items():
        cfg = BackboneConfig(**small)
        cfg.apm_merge = dict(cfg.apm_merge, HR=list(flags))
        out, _, _ = Backbone(cfg)(torch.rand(1, 512, 512, 3), "HR")
        print(f"merges {name:>4s}: HR grid {out.grid}")

# top-1 routing: each token goes to exactly one expert
moe = MoEFFN(16, 32, n_experts=4, top_k=1)
with torch.no_grad():
    y, stats = moe_ffn(torch.randn(64, 16), moe)
print("tokens per expert", stats.layers["moe"].counts.tolist())
# 1.0 means perfectly balanced; 4.0 would be every token on one expert
print("balance loss", round(float(moe_aux_loss(stats)), 4))
