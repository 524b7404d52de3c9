"""
A short pre-training run and a k-NN probe
=========================================

Trains a tiny model for a few iterations and compares the frozen
features before and after with a cosine k-NN. At this size the numbers
move little; the point is the workflow.
"""

import dataclasses

from geofm.config import BackboneConfig, FusionConfig, ModelConfig, ObjectiveConfig, PretrainConfig, TrainConfig
from geofm.datakit import AugSpec, DatasetSpec, generate_dataset
from geofm.evaluation import extract_features, knn_eval
from geofm.trainer import Pretrainer

model = ModelConfig(
    BackboneConfig(base_dim=8, depths=(1, 1, 1, 1), window_size=4, head_dim=8, n_prompts=2,
                   moe_last_L=2, n_experts=2, top_k=1),
    FusionConfig(depth=1, head_dim=16, n_prototypes=2),
    ObjectiveConfig(head_hidden=32, head_out=16, head_bottleneck=8, n_queries=2, n_clusters=2,
                    n_classes=3, text_dim=8),
)
data = DatasetSpec(count=24, n_classes=3, ms_size=16, t_ms=4, t_sar=2)
cfg = PretrainConfig(model, TrainConfig(total_iters=10, batch_size=4), AugSpec(n_local=2, ms_seq=3, sar_seq=2), data)

samples = generate_dataset(cfg.data)
train, test = samples[:16], samples[16:]
trainer = Pretrainer(cfg)


def probe(tag):
    a, ya = extract_features(trainer.model, train)
    b, yb = extract_features(trainer.model, test)
    print(tag, "k-NN accuracy", knn_eval(a, ya, b, yb, k=5).accuracy)


probe("random init")
rows = trainer.fit(train, callback=lambda _t, row: print(
    f"iter {row['iter']:2d} loss {row['loss']:.3f} lr {row['lr']:.2e} momentum {row['momentum']:.4f}"))
probe("after training")
