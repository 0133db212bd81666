"""
Conformal training versus plain cross-entropy
=============================================

Fit the correction model with and without the conformity loss on the same
seeds, then compare hard RANK set sizes at alpha = 0.05.
"""

import numpy as np

from rankcp.config import ExperimentConfig
from rankcp.graph import normalized_adjacency
from rankcp.pipeline import build_graph, run_once, summarize

cfg = ExperimentConfig().replace(**{"run.splits": 50})
g = build_graph(cfg)
adj = normalized_adjacency(g)

sizes = {"rcp-gnn": [], "wo-conf-tr": []}
for run in range(3):
    base = None
    for variant in sizes:
        res = run_once(cfg, g, run, variant, adj=adj, base_params=base)
        base = res.base_params  # share the base model across the pair
        (row,) = summarize(res.records)
        sizes[variant].append(row["ineff_mean"])
        print(f"run {run} {variant:>10}: coverage {row['coverage_mean']:.3f} "
              f"size {row['ineff_mean']:.3f}")

for variant, vals in sizes.items():
    print(f"{variant:>10}: mean size {np.mean(vals):.3f}")
