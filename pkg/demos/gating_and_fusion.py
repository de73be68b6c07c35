"""Train a gating network on a synthetic fleet and look at what it learned.

Run with ``python3 demos/gating_and_fusion.py``.
"""

from __future__ import annotations

import numpy as np

from moe2.domain import SubsetMask, substreams
from moe2.gating import GatingDataset, TrainConfig, gating_forward, positive_scores, train_gating
from moe2.inference import batch_accuracy, routing_weights
from moe2.synth import FleetSpec, WorkloadSpec, expert_outputs, generate_fleet, generate_workload, kmeans_cluster

# %% workload and fleet: 8 clusters, one specialist per cluster
r_wl, r_km, r_fleet = substreams(0, 3)
workload = generate_workload(WorkloadSpec(n_prompts=600), r_wl)
labels = kmeans_cluster(workload.embeddings(), 8, r_km).labels
fleet = generate_fleet(FleetSpec(), labels, r_fleet)
print("home clusters:", [e.home_cluster for e in fleet])

# %% teacher-forced targets and training
outputs = expert_outputs(fleet, workload)
data = GatingDataset.build(workload, outputs=outputs)
train, test = np.arange(480), np.arange(480, 600)
result = train_gating(data.batch(train), TrainConfig(epochs=20))
print(f"training loss {result.initial_loss:.3f} -> {result.final_loss:.3f}")

# %% does the top-scored expert match the prompt's cluster?
X = workload.embeddings()[test]
top = positive_scores(gating_forward(result.params, X)).argmax(axis=1)
home = np.array([fleet[n].home_cluster for n in top])
print(f"top expert is the cluster specialist on {np.mean(home == workload.cluster_labels()[test]):.1%} of held-out prompts")

# %% accuracy of gated top-2 fusion against uniform voting and single experts
held = outputs.subset(test)
full = SubsetMask.full(len(fleet))
for name, W in [("gated top-2", routing_weights(result.params, full, X, 2, 8)),
                ("uniform vote", routing_weights(None, full, X, None, 8))]:
    print(f"{name:>13}: {batch_accuracy(held, W):.1%}")
single = [batch_accuracy(held, routing_weights(None, 1 << n, X, None, 8)) for n in range(8)]
print(f"single experts: mean {np.mean(single):.1%}, best {max(single):.1%}")
