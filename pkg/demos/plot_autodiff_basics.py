"""
Gradients on a tape
===================

Every model and loss in ``rankcp`` is recorded on a :class:`rankcp.Tape`.
This script builds a tiny program, reads its gradients and checks them
against central finite differences.
"""

import numpy as np

from rankcp.tensor import Tape, backward, grad_check

rng = np.random.default_rng(0)

###############################################################################
# A two-layer program: ``mean(sigmoid(X W))``.

tape = Tape()
x = tape.constant(rng.normal(size=(5, 3)))
w = tape.parameter(rng.normal(size=(3, 2)))
loss = tape.apply("mean-all", tape.apply("sigmoid", tape.apply("matmul", x, w)))
print("loss:", tape.value(loss)[0, 0])

###############################################################################
# ``backward`` returns one gradient per parameter node.

grads = backward(tape, loss)
print("dloss/dW:\n", grads[w])

###############################################################################
# ``grad_check`` replays the program with each parameter entry nudged by
# +-h and reports the worst relative disagreement.

print("finite-difference error:", grad_check(tape, loss, h=1e-5))
