"""Dense-matrix reverse-mode differentiation.

A :class:`Tape` records every operation applied to 2-D float64 arrays as a
node in a Wengert list.  ``backward`` walks the list in reverse and
accumulates gradients; ``grad_check`` compares those gradients with central
finite differences obtained by replaying the recorded program.

Example
-------
>>> tape = Tape()
>>> w = tape.parameter(np.zeros((2, 2)))
>>> loss = tape.apply("sum-all", tape.apply("sigmoid", w))
>>> backward(tape, loss)[w]
array([[0.25, 0.25],
       [0.25, 0.25]])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np

from .exceptions import NonFiniteError, RankCPError, ShapeError

__all__ = [
    "OPS",
    "Tape",
    "backward",
    "forward",
    "grad_check",
    "stable_sigmoid",
]


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function evaluated without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _is_row_broadcast(a, b):
    return b.shape[0] == 1 and a.shape[0] != 1 and a.shape[1] == b.shape[1]


def _check_same_or_row(op, a, b):
    if a.shape != b.shape and not _is_row_broadcast(a, b):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


# Shape checks ----------------------------------------------------------------

def _check_matmul(vals, attrs):
    a, b = vals
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")


def _check_binary(op):
    def check(vals, attrs):
        _check_same_or_row(op, *vals)
    return check


def _check_gather(vals, attrs):
    idx = np.asarray(attrs["index"])
    n = vals[0].shape[0]
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= n)):
        raise ShapeError(f"gather-rows: index out of range for shape {vals[0].shape}")


def _check_constant(op):
    def check(vals, attrs):
        if "c" not in attrs or not np.isfinite(attrs["c"]):
            raise RankCPError(f"{op}: requires a finite constant c")
        if op == "divide-by-constant" and attrs["c"] == 0:
            raise RankCPError("divide-by-constant: c must be non-zero")
    return check


# Forward/backward rules ------------------------------------------------------
# Each backward rule receives (input values, output value, output gradient,
# attrs) and returns one gradient per input.

def _sigmoid_bwd(v, out, g, at):
    return [g * out * (1.0 - out)]


def _softmax_bwd(v, out, g, at):
    return [out * (g - (g * out).sum(axis=1, keepdims=True))]


def _log_softmax_bwd(v, out, g, at):
    return [g - np.exp(out) * g.sum(axis=1, keepdims=True)]


def _gather_bwd(v, out, g, at):
    grad = np.zeros_like(v[0])
    np.add.at(grad, np.asarray(at["index"]), g)
    return [grad]


@dataclass(frozen=True)
class _Op:
    arity: int
    fwd: Callable
    bwd: Callable
    check: Callable | None = None


OPS: Dict[str, _Op] = {
    "matmul": _Op(2, lambda v, at: v[0] @ v[1],
                  lambda v, out, g, at: [g @ v[1].T, v[0].T @ g], _check_matmul),
    "add": _Op(2, lambda v, at: v[0] + v[1],
               lambda v, out, g, at: [g, _unbroadcast(g, v[1].shape)],
               _check_binary("add")),
    "subtract": _Op(2, lambda v, at: v[0] - v[1],
                    lambda v, out, g, at: [g, -_unbroadcast(g, v[1].shape)],
                    _check_binary("subtract")),
    "multiply": _Op(2, lambda v, at: v[0] * v[1],
                    lambda v, out, g, at: [g * v[1], _unbroadcast(g * v[0], v[1].shape)],
                    _check_binary("multiply")),
    "divide": _Op(2, lambda v, at: v[0] / v[1],
                  lambda v, out, g, at: [g / v[1],
                                         _unbroadcast(-g * v[0] / v[1] ** 2, v[1].shape)],
                  _check_binary("divide")),
    "scale-by-constant": _Op(1, lambda v, at: v[0] * at["c"],
                             lambda v, out, g, at: [g * at["c"]],
                             _check_constant("scale-by-constant")),
    "divide-by-constant": _Op(1, lambda v, at: v[0] / at["c"],
                              lambda v, out, g, at: [g / at["c"]],
                              _check_constant("divide-by-constant")),
    "add-constant": _Op(1, lambda v, at: v[0] + at["c"],
                        lambda v, out, g, at: [g], _check_constant("add-constant")),
    "row-softmax": _Op(1, lambda v, at: _softmax(v[0]), _softmax_bwd),
    "row-log-softmax": _Op(1, lambda v, at: _log_softmax(v[0]), _log_softmax_bwd),
    "sigmoid": _Op(1, lambda v, at: stable_sigmoid(v[0]), _sigmoid_bwd),
    # relu and max-with-zero are the same map; the subgradient at 0 is 0.
    "relu": _Op(1, lambda v, at: np.maximum(v[0], 0.0),
                lambda v, out, g, at: [g * (v[0] > 0)]),
    "max-with-zero": _Op(1, lambda v, at: np.maximum(v[0], 0.0),
                         lambda v, out, g, at: [g * (v[0] > 0)]),
    "log": _Op(1, lambda v, at: np.log(v[0]), lambda v, out, g, at: [g / v[0]]),
    "transpose": _Op(1, lambda v, at: np.ascontiguousarray(v[0].T),
                     lambda v, out, g, at: [g.T]),
    "sum-all": _Op(1, lambda v, at: np.array([[v[0].sum()]]),
                   lambda v, out, g, at: [np.full_like(v[0], g[0, 0])]),
    "mean-all": _Op(1, lambda v, at: np.array([[v[0].mean()]]),
                    lambda v, out, g, at: [np.full_like(v[0], g[0, 0] / v[0].size)]),
    "gather-rows": _Op(1, lambda v, at: v[0][np.asarray(at["index"])], _gather_bwd,
                       _check_gather),
}

_LEAVES = ("constant", "parameter")


@dataclass
class Tape:
    """Append-only record of matrix operations.

    Nodes are integers indexing parallel lists.  Leaf nodes are created with
    :meth:`constant` and :meth:`parameter`; only parameters are reported by
    :func:`backward`.
    """

    ops: List[str] = field(default_factory=list)
    inputs: List[tuple] = field(default_factory=list)
    attrs: List[dict] = field(default_factory=list)
    values: List[np.ndarray] = field(default_factory=list)
    grads: List[np.ndarray | None] = field(default_factory=list)
    params: List[int] = field(default_factory=list)

    def _append(self, op, inputs, value, attrs):
        value.setflags(write=False)
        self.ops.append(op)
        self.inputs.append(tuple(inputs))
        self.attrs.append(attrs)
        self.values.append(value)
        self.grads.append(None)
        return len(self.values) - 1

    def constant(self, value) -> int:
        return self._append("constant", (), _as_matrix(value), {})

    def parameter(self, value) -> int:
        node = self._append("parameter", (), _as_matrix(value), {})
        self.params.append(node)
        return node

    def apply(self, op: str, *inputs: int, **attrs) -> int:
        """Append ``op`` applied to ``inputs`` and return the new node id."""
        if op not in OPS:
            raise RankCPError(f"unknown op {op!r}")
        rule = OPS[op]
        if len(inputs) != rule.arity:
            raise RankCPError(f"{op}: expects {rule.arity} inputs, got {len(inputs)}")
        for i in inputs:
            if not 0 <= i < len(self.values):
                raise RankCPError(f"{op}: unknown input node {i}")
        vals = [self.values[i] for i in inputs]
        value = _evaluate(op, vals, attrs)
        return self._append(op, inputs, value, attrs)

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def grad(self, node: int) -> np.ndarray:
        g = self.grads[node]
        return np.zeros_like(self.values[node]) if g is None else g

    def zero_grad(self) -> None:
        self.grads = [None] * len(self.values)

    def set_value(self, node: int, value) -> None:
        """Overwrite a leaf value; call :meth:`replay` to refresh dependants."""
        if self.ops[node] not in _LEAVES:
            raise RankCPError("only leaf nodes can be overwritten")
        value = _as_matrix(value)
        if value.shape != self.values[node].shape:
            raise ShapeError(f"set_value: shape {value.shape} != {self.values[node].shape}")
        value.setflags(write=False)
        self.values[node] = value

    def replay(self) -> None:
        """Recompute every non-leaf value from the current leaf values."""
        for node, op in enumerate(self.ops):
            if op in _LEAVES:
                continue
            vals = [self.values[i] for i in self.inputs[node]]
            value = _evaluate(op, vals, self.attrs[node])
            value.setflags(write=False)
            self.values[node] = value

    def __len__(self):
        return len(self.values)


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"matrices must be 2-D, got shape {arr.shape}")
    return arr


def _evaluate(op, vals, attrs):
    rule = OPS[op]
    if rule.check is not None:
        rule.check(vals, attrs)
    with np.errstate(all="ignore"):
        value = np.asarray(rule.fwd(vals, attrs), dtype=np.float64)
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    return value


def forward(tape: Tape, op: str, inputs: Sequence[int], **attrs) -> int:
    """Functional alias for :meth:`Tape.apply`."""
    return tape.apply(op, *inputs, **attrs)


def backward(tape: Tape, loss: int) -> Dict[int, np.ndarray]:
    """Reverse-accumulate d(loss)/d(node) for every node on ``tape``.

    Returns a mapping from parameter node id to its gradient.  Calling again
    recomputes gradients from scratch, so results are reproducible.
    """
    if tape.values[loss].shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {tape.values[loss].shape}")
    grads: List[np.ndarray | None] = [None] * len(tape.values)
    grads[loss] = np.ones((1, 1))
    for node in range(loss, -1, -1):
        g = grads[node]
        op = tape.ops[node]
        if g is None or op in _LEAVES:
            continue
        ins = tape.inputs[node]
        vals = [tape.values[i] for i in ins]
        for i, gi in zip(ins, OPS[op].bwd(vals, tape.values[node], g, tape.attrs[node])):
            grads[i] = gi if grads[i] is None else grads[i] + gi
    tape.grads = [np.zeros_like(v) if g is None else g for v, g in zip(tape.values, grads)]
    return {p: tape.grads[p] for p in tape.params}


def grad_check(tape: Tape, loss: int, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for one entry is ``|analytic - numeric| / max(1, |numeric|)``.
    Leaves the tape values unchanged on return.
    """
    if not h > 0:
        raise RankCPError(f"grad_check: step h must be positive, got {h}")
    analytic = backward(tape, loss)
    worst = 0.0
    for p in tape.params:
        base = tape.values[p].copy()
        for idx in np.ndindex(base.shape):
            bumped = base.copy()
            bumped[idx] += h
            tape.set_value(p, bumped)
            tape.replay()
            up = tape.values[loss][0, 0]
            bumped[idx] = base[idx] - h
            tape.set_value(p, bumped)
            tape.replay()
            down = tape.values[loss][0, 0]
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[p][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        tape.set_value(p, base)
    tape.replay()
    return worst
