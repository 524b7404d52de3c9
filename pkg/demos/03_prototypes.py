"""
Balanced assignment and regional prototypes
===========================================

Sinkhorn balancing turns a similarity matrix into a transport plan with
uniform marginals. The prototype bank uses it to pull each region's
prototypes toward the features seen there.
"""

import torch

from geofm.fusion import PrototypeBank, gcpl_update, region_index, sinkhorn_assign

torch.manual_seed(0)
M = torch.randn(6, 4, dtype=torch.float64)
S = sinkhorn_assign(M, eps=0.05, iters=500)
print("row sums", S.sum(1).numpy().round(6))
print("col sums", S.sum(0).numpy().round(6))

bank = PrototypeBank(8, n_prototypes=3, rows=4, cols=8, momentum=0.9)
r = region_index(12.5, 41.9, bank)
print("region of (12.5E, 41.9N):", r, "of", bank.n_regions)

features = torch.randn(20, 8) + 2.0
before = bank.prototypes.clone()
for _ in range(30):
    gcpl_update(features, r, bank)
drift = (bank.prototypes[r] - before[r]).norm(dim=1)
print("prototype drift after 30 updates", drift.numpy().round(3))
others = torch.arange(bank.n_regions) != r
print("other regions untouched:", torch.equal(bank.prototypes[others], before[others]))
