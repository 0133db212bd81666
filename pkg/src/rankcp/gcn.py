"""Two-stage graph convolutional classifiers.

The base model maps node features to class probabilities; the correction
model re-maps frozen base probabilities through the graph.  Its last layer
sees the final hidden representation stacked with ``log(mu)``, so weights
equal to ``[0; I]`` reproduce the base probabilities exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import DivergenceError, NonFiniteError, RankCPError, ShapeError
from .graph import Graph, NodeSplit, normalized_adjacency, read_matrix_csv, write_matrix_csv
from .tensor import Tape, backward

__all__ = [
    "GcnParams",
    "TrainHyper",
    "accuracy",
    "base_logits",
    "correction_logits",
    "cross_entropy",
    "forward_base",
    "forward_correction",
    "init_base_params",
    "init_correction_params",
    "load_params",
    "save_params",
    "sgd_momentum_step",
    "train_base",
]

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class GcnParams:
    layer_weights: tuple
    hidden_dim: int
    n_layers: int
    residual: bool = False

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.layer_weights)
        if len(ws) != self.n_layers or self.n_layers < 1:
            raise ShapeError(f"expected {self.n_layers} layer weights, got {len(ws)}")
        k = ws[-1].shape[1]
        for l in range(len(ws) - 1):
            # The residual head also consumes the K log-probability columns.
            expected = ws[l].shape[1] + (k if self.residual and l == len(ws) - 2 else 0)
            if ws[l + 1].shape[0] != expected:
                raise ShapeError(
                    f"layer {l} output {ws[l].shape[1]} does not feed layer {l + 1} "
                    f"input {ws[l + 1].shape[0]}")
        if self.residual and len(ws) == 1 and ws[0].shape[0] != 2 * k:
            raise ShapeError(f"single-layer correction head must be {2 * k}x{k}")
        for w in ws:
            w.setflags(write=False)
        object.__setattr__(self, "layer_weights", ws)

    @property
    def n_classes(self) -> int:
        return self.layer_weights[-1].shape[1]

    @property
    def input_dim(self) -> int:
        w0 = self.layer_weights[0]
        if self.residual and self.n_layers == 1:
            return w0.shape[0] - w0.shape[1]
        return w0.shape[0]

    def replace(self, weights: Sequence[np.ndarray]) -> "GcnParams":
        return GcnParams(tuple(weights), self.hidden_dim, self.n_layers, self.residual)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-2
    epochs: int = 200
    hidden: int = 64
    n_layers: int = 2
    momentum: float = 0.9
    seed: int = 0


def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_base_params(in_dim: int, n_classes: int, hidden: int = 64, n_layers: int = 2,
                     seed: int = 0) -> GcnParams:
    rng = np.random.default_rng(seed)
    dims = [in_dim] + [hidden] * (n_layers - 1) + [n_classes]
    weights = [_glorot(rng, dims[i], dims[i + 1]) for i in range(n_layers)]
    return GcnParams(tuple(weights), hidden, n_layers)


def init_correction_params(n_classes: int, hidden: int = 64, n_layers: int = 2,
                           seed: int = 0, identity: bool = True,
                           head_scale: float = 1e-2) -> GcnParams:
    """Correction-model weights.

    With ``identity=True`` the last layer starts as ``[small; I]`` so the
    output is within a small perturbation of the input probabilities;
    otherwise every layer is Glorot-initialized.
    """
    rng = np.random.default_rng(seed)
    dims = [n_classes] + [hidden] * (n_layers - 1)
    weights = [_glorot(rng, dims[i], dims[i + 1]) for i in range(n_layers - 1)]
    head = _glorot(rng, dims[-1] + n_classes, n_classes)
    if identity:
        head[: dims[-1]] *= head_scale
        head[dims[-1]:] = np.eye(n_classes)
    weights.append(head)
    return GcnParams(tuple(weights), hidden, n_layers, residual=True)


def _adj(g: Graph, adj):
    return normalized_adjacency(g) if adj is None else adj


def _propagate(tape, adj_node, h, weight_nodes, ah=None):
    """Hidden GCN layers: relu(A H W) for all but the last weight.

    ``ah`` optionally supplies the constant product ``A H`` of the input.
    """
    for l, w in enumerate(weight_nodes[:-1]):
        agg = ah if (l == 0 and ah is not None) else tape.apply("matmul", adj_node, h)
        h = tape.apply("relu", tape.apply("matmul", agg, w))
    return h


def _aggregate(tape, adj_node, h, n_layers, ah):
    if n_layers == 1 and ah is not None:
        return ah
    return tape.apply("matmul", adj_node, h)


def base_logits(tape: Tape, adj_node: int, x_node: int, weight_nodes: Sequence[int],
                ax_node: Optional[int] = None) -> int:
    """Logits of the base model, ``A relu(A X W1) W2`` for two layers.

    ``ax_node`` may hold the precomputed constant ``A X``.
    """
    h = _propagate(tape, adj_node, x_node, weight_nodes, ax_node)
    agg = _aggregate(tape, adj_node, h, len(weight_nodes), ax_node)
    return tape.apply("matmul", agg, weight_nodes[-1])


def correction_logits(tape: Tape, adj_node: int, mu_node: int, log_mu_node: int,
                      weight_nodes: Sequence[int], amu_node: Optional[int] = None) -> int:
    """Logits of the correction model: ``[A H, log mu] @ W_last``."""
    h = _propagate(tape, adj_node, mu_node, weight_nodes, amu_node)
    head = weight_nodes[-1]
    rows = tape.value(head).shape[0]
    width = rows - tape.value(mu_node).shape[1]
    w_graph = tape.apply("gather-rows", head, index=np.arange(width))
    w_skip = tape.apply("gather-rows", head, index=np.arange(width, rows))
    agg = _aggregate(tape, adj_node, h, len(weight_nodes), amu_node)
    graph_part = tape.apply("matmul", agg, w_graph)
    return tape.apply("add", graph_part, tape.apply("matmul", log_mu_node, w_skip))


def _check_input(params: GcnParams, dim: int, what: str):
    if params.input_dim != dim:
        raise ShapeError(f"{what}: parameters expect input dim {params.input_dim}, got {dim}")


def forward_base(g: Graph, params: GcnParams, tape: Optional[Tape] = None, adj=None) -> np.ndarray:
    """Row-stochastic (n, K) base-model probabilities."""
    _check_input(params, g.features.shape[1], "forward_base")
    if params.n_classes != g.n_classes:
        raise ShapeError(f"forward_base: parameters emit {params.n_classes} classes, "
                         f"graph has {g.n_classes}")
    tape = Tape() if tape is None else tape
    ws = [tape.parameter(w) for w in params.layer_weights]
    logits = base_logits(tape, tape.constant(_adj(g, adj)), tape.constant(g.features), ws)
    return tape.value(tape.apply("row-softmax", logits))


def log_probs(mu: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(mu, LOG_FLOOR))


def forward_correction(mu: np.ndarray, g: Graph, params: GcnParams,
                       tape: Optional[Tape] = None, adj=None) -> np.ndarray:
    """Row-stochastic (n, K) corrected probabilities from frozen ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (g.n_nodes, params.n_classes):
        raise ShapeError(f"forward_correction: mu shape {mu.shape} does not match "
                         f"({g.n_nodes}, {params.n_classes})")
    tape = Tape() if tape is None else tape
    ws = [tape.parameter(w) for w in params.layer_weights]
    logits = correction_logits(tape, tape.constant(_adj(g, adj)), tape.constant(mu),
                               tape.constant(log_probs(mu)), ws)
    return tape.value(tape.apply("row-softmax", logits))


def cross_entropy(tape: Tape, logits: int, nodes, labels) -> int:
    """Mean multiclass cross-entropy over ``nodes``, a 1x1 node."""
    nodes = np.asarray(nodes, dtype=np.int64)
    k = tape.value(logits).shape[1]
    logp = tape.apply("row-log-softmax", tape.apply("gather-rows", logits, index=nodes))
    mask = np.zeros((nodes.size, k))
    mask[np.arange(nodes.size), np.asarray(labels)[nodes]] = 1.0
    picked = tape.apply("sum-all", tape.apply("multiply", logp, tape.constant(mask)))
    return tape.apply("scale-by-constant", picked, c=-1.0 / nodes.size)


def accuracy(probs: np.ndarray, labels, nodes=None) -> float:
    labels = np.asarray(labels)
    if nodes is not None:
        probs, labels = probs[nodes], labels[nodes]
    return float((np.argmax(probs, axis=1) == labels).mean())


def sgd_momentum_step(weights, grads, velocity, lr, momentum):
    """One heavy-ball update; returns (new weights, new velocity)."""
    new_v = [momentum * v + g for v, g in zip(velocity, grads)]
    new_w = [w - lr * v for w, v in zip(weights, new_v)]
    return new_w, new_v


def train_base(g: Graph, split: NodeSplit, hyper: TrainHyper = TrainHyper(),
               adj=None, record: Optional[List[float]] = None) -> GcnParams:
    """Fit the base GCN by full-batch momentum SGD on the training nodes.

    Returns the weights with the best validation accuracy (earliest on ties).
    If ``record`` is a list, the training loss of every epoch is appended.
    """
    if len(split.train) == 0 or len(split.valid) == 0:
        raise RankCPError("train_base needs non-empty train and validation sets")
    adj = _adj(g, adj)
    params = init_base_params(g.features.shape[1], g.n_classes, hyper.hidden,
                              hyper.n_layers, hyper.seed)
    weights = list(params.layer_weights)
    velocity = [np.zeros_like(w) for w in weights]
    ax = adj @ g.features
    best, best_acc = params, -1.0
    for epoch in range(hyper.epochs + 1):
        tape = Tape()
        ws = [tape.parameter(w) for w in weights]
        try:
            logits = base_logits(tape, tape.constant(adj), tape.constant(g.features), ws,
                                 tape.constant(ax))
        except NonFiniteError as err:
            raise DivergenceError(f"base training diverged at epoch {epoch}: {err}") from None
        # Weights entering this epoch are scored before they are updated.
        acc = accuracy(tape.value(logits), g.labels, split.valid)
        if acc > best_acc:
            best, best_acc = params.replace(weights), acc
        if epoch == hyper.epochs:
            break
        loss = cross_entropy(tape, logits, split.train, g.labels)
        value = tape.value(loss)[0, 0]
        if record is not None:
            record.append(float(value))
        grads = backward(tape, loss)
        weights, velocity = sgd_momentum_step(weights, [grads[w] for w in ws], velocity,
                                              hyper.lr, hyper.momentum)
        if not all(np.isfinite(w).all() for w in weights):
            raise DivergenceError(f"base training diverged at epoch {epoch}")
    return best


def save_params(params: GcnParams, directory) -> Path:
    """Write one ``layer_<l>.csv`` per layer plus ``meta.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for l, w in enumerate(params.layer_weights):
        write_matrix_csv(directory / f"layer_{l}.csv", w)
    with open(directory / "meta.csv", "w", encoding="utf-8") as fh:
        fh.write("hidden_dim,n_layers,residual\n")
        fh.write(f"{params.hidden_dim},{params.n_layers},{int(params.residual)}\n")
    return directory


def load_params(directory) -> GcnParams:
    directory = Path(directory)
    meta = (directory / "meta.csv").read_text(encoding="utf-8").splitlines()
    hidden, n_layers, residual = (int(v) for v in meta[1].split(","))
    weights = [read_matrix_csv(directory / f"layer_{l}.csv") for l in range(n_layers)]
    return GcnParams(tuple(weights), hidden, n_layers, bool(residual))
