"""
Temperature and the smooth rank score
=====================================

The training loss replaces hard class ranks by sums of sigmoids.  Lower
temperatures bring the soft ranks closer to the hard ``rank - 0.5``.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from rankcp.smooth import smooth_rank_scores
from rankcp.tensor import Tape

row = np.array([[0.45, 0.3, 0.15, 0.1]])
taus = np.logspace(-3, 0.5, 40)
curves = []
for tau in taus:
    tape = Tape()
    curves.append(tape.value(smooth_rank_scores(tape, tape.constant(row), tau))[0])
curves = np.array(curves)

fig, ax = plt.subplots(figsize=(5, 3))
for k in range(row.shape[1]):
    ax.semilogx(taus, curves[:, k], label=f"p={row[0, k]}")
ax.set_xlabel("tau")
ax.set_ylabel("soft rank score")
ax.legend(fontsize=8)
fig.tight_layout()
fig.savefig("smooth_rank_scores.png", dpi=120)
print("hard limit:", curves[0].round(3))
