"""
Prediction sets from a trained GCN
==================================

Train a base GCN on a synthetic stochastic block model, then calibrate
THR, APS and RANK prediction sets on held-out nodes and compare coverage
and average set size.
"""

import numpy as np

from rankcp.conformal import build_sets, calibrate, coverage, inefficiency
from rankcp.gcn import TrainHyper, accuracy, forward_base, train_base
from rankcp.graph import generate_sbm, split_nodes

###############################################################################
# Four blocks of 150 nodes with noisy one-hot features.

g = generate_sbm([150] * 4, p_in=0.03, p_out=0.005, feature_dim=16, feature_noise=1.3, seed=0)
split = split_nodes(g, seed=0)
params = train_base(g, split, TrainHyper(epochs=150))
probs = forward_base(g, params)
print(f"test accuracy {accuracy(probs, g.labels, split.test):.3f}")

###############################################################################
# Calibrate on the calibration nodes and evaluate on the test nodes.

alpha = 0.1
cal, test = split.calib, split.test
for kind in ("thr", "aps", "rank"):
    fitted = calibrate(probs[cal], g.labels[cal], alpha, kind)
    sets = build_sets(probs[test], fitted, kind, alpha)
    print(f"{kind:>4}: coverage {coverage(sets, g.labels[test]):.3f}  "
          f"mean size {inefficiency(sets):.2f}")

###############################################################################
# The RANK calibration keeps the top ``r_star`` classes for nodes whose
# ``r_star``-th probability clears ``mu_star`` and one fewer otherwise.

fitted = calibrate(probs[cal], g.labels[cal], alpha, "rank")
print(fitted)
sizes = build_sets(probs[test], fitted, "rank").sizes
print("set-size histogram:", np.bincount(sizes, minlength=g.n_classes + 1))
