"""Graph container, CSV ingestion, GCN normalization, node splits and SBM
generation."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from .exceptions import RankCPError

__all__ = [
    "Graph",
    "NodeSplit",
    "generate_sbm",
    "load_dataset",
    "normalized_adjacency",
    "save_dataset",
    "split_nodes",
]

_FEATURE_HEADER = re.compile(r"^\s*node_features\s*,\s*d\s*=\s*(\d+)\s*$")
_LABEL_HEADER = re.compile(r"^\s*labels\s*,\s*k\s*=\s*(\d+)\s*$")


def _canonical_edges(edges, n_nodes: int) -> np.ndarray:
    """Sorted, deduplicated (i < j) edge array with self-loops removed."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n_nodes):
        raise RankCPError(f"edge endpoint outside [0, {n_nodes})")
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with one class label per node.

    ``edges`` is stored canonically: each undirected edge once as ``(i, j)``
    with ``i < j``, sorted lexicographically.
    """

    n_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        edges = _canonical_edges(self.edges, self.n_nodes)
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != self.n_nodes:
            raise RankCPError(
                f"features must have {self.n_nodes} rows, got shape {features.shape}")
        if labels.shape != (self.n_nodes,):
            raise RankCPError(f"labels length {labels.size} != n_nodes {self.n_nodes}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise RankCPError(f"labels must lie in [0, {self.n_classes})")
        for name, arr in (("edges", edges), ("features", features), ("labels", labels)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.n_nodes == other.n_nodes and self.n_classes == other.n_classes
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


def _data_lines(path: Path):
    """Yield (line number, stripped text) for non-blank, non-comment lines."""
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                yield lineno, text


def read_matrix_csv(path) -> np.ndarray:
    """Read the ``node_features,d=<d>`` CSV dialect into an (n, d) array."""
    path = Path(path)
    lines = _data_lines(path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise RankCPError(f"{path}: empty file") from None
    m = _FEATURE_HEADER.match(header)
    if m is None:
        raise RankCPError(f"{path}:{lineno}: expected header 'node_features,d=<d>'")
    d = int(m.group(1))
    rows = []
    for lineno, text in lines:
        try:
            row = [float(v) for v in text.split(",")]
        except ValueError:
            raise RankCPError(f"{path}:{lineno}: non-numeric value") from None
        if len(row) != d:
            raise RankCPError(f"{path}:{lineno}: expected {d} columns, got {len(row)}")
        rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(len(rows), d)


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"node_features,d={matrix.shape[1]}\n")
        for row in matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_dataset(features_path, edges_path, labels_path) -> Graph:
    """Load a graph from the three-file CSV format.

    Features: header ``node_features,d=<d>`` then one row of ``d`` reals per
    node.  Edges: ``src,dst`` integer pairs, ``#`` comments allowed.  Labels:
    header ``labels,k=<K>`` then one integer per node.  Reversed and repeated
    edges collapse to one undirected edge.
    """
    features = read_matrix_csv(features_path)
    n = features.shape[0]

    labels_path = Path(labels_path)
    lines = _data_lines(labels_path)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise RankCPError(f"{labels_path}: empty file") from None
    m = _LABEL_HEADER.match(header)
    if m is None:
        raise RankCPError(f"{labels_path}:{lineno}: expected header 'labels,k=<K>'")
    k = int(m.group(1))
    labels = []
    for lineno, text in lines:
        try:
            y = int(text)
        except ValueError:
            raise RankCPError(f"{labels_path}:{lineno}: label is not an integer") from None
        if not 0 <= y < k:
            raise RankCPError(f"{labels_path}:{lineno}: label {y} outside [0, {k})")
        labels.append(y)
    if len(labels) != n:
        raise RankCPError(
            f"{labels_path}: {len(labels)} labels but {n} feature rows")

    edges_path = Path(edges_path)
    edges = []
    for lineno, text in _data_lines(edges_path):
        parts = text.split(",")
        try:
            src, dst = (int(p) for p in parts)
        except ValueError:
            raise RankCPError(f"{edges_path}:{lineno}: expected two integer columns") from None
        if not (0 <= src < n and 0 <= dst < n):
            raise RankCPError(
                f"{edges_path}:{lineno}: node id outside [0, {n}) in edge {src},{dst}")
        edges.append((src, dst))
    return Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2), features,
                 np.array(labels, dtype=np.int64), k)


def save_dataset(g: Graph, directory) -> Tuple[Path, Path, Path]:
    """Write ``features.csv``, ``edges.csv`` and ``labels.csv`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fpath, epath, lpath = (directory / f"{name}.csv" for name in ("features", "edges", "labels"))
    write_matrix_csv(fpath, g.features)
    with open(epath, "w", encoding="utf-8") as fh:
        fh.write("# src,dst\n")
        for i, j in g.edges:
            fh.write(f"{i},{j}\n")
    with open(lpath, "w", encoding="utf-8") as fh:
        fh.write(f"labels,k={g.n_classes}\n")
        fh.writelines(f"{y}\n" for y in g.labels)
    return fpath, epath, lpath


def normalized_adjacency(g: Graph) -> np.ndarray:
    """Dense symmetric ``D^-1/2 (A + I) D^-1/2`` with D the degree of A + I."""
    n = g.n_nodes
    if n < 1:
        raise RankCPError("graph has no nodes")
    a = np.eye(n)
    if g.n_edges:
        i, j = g.edges[:, 0], g.edges[:, 1]
        a[i, j] = 1.0
        a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


@dataclass(frozen=True)
class NodeSplit:
    """Disjoint train / validation / calibration / test node-id arrays."""

    train: np.ndarray
    valid: np.ndarray
    calib: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "valid", "calib", "test"):
            arr = np.sort(np.asarray(getattr(self, name), dtype=np.int64))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def sizes(self) -> Tuple[int, int, int, int]:
        return len(self.train), len(self.valid), len(self.calib), len(self.test)


def _floor_count(x: float) -> int:
    # Guard against 0.1 * 100 -> 10.000000000000002 style round-off.
    return int(math.floor(x + 1e-9))


def split_nodes(n_nodes: int | Graph, ratios: Sequence[float] = (0.2, 0.1, 0.7),
                calib_fraction: float = 0.5, seed: int = 0) -> NodeSplit:
    """Random train/valid/calib/test partition.

    ``ratios`` gives the train, validation and remaining fractions.  The
    calibration set takes ``calib_fraction`` of the remaining pool and the
    test set the rest, so calibration and test nodes come from one uniformly
    shuffled pool.  Counts are floored; the remainder goes to test.
    """
    n = n_nodes.n_nodes if isinstance(n_nodes, Graph) else int(n_nodes)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise RankCPError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    if not 0 < calib_fraction < 1:
        raise RankCPError(f"calib_fraction must lie in (0, 1), got {calib_fraction}")
    n_train = _floor_count(ratios[0] * n)
    n_valid = _floor_count(ratios[1] * n)
    n_rest = n - n_train - n_valid
    n_calib = _floor_count(calib_fraction * n_rest)
    n_test = n_rest - n_calib
    if min(n_train, n_valid, n_calib, n_test) < 1:
        raise RankCPError(
            f"split of {n} nodes leaves an empty set "
            f"(train={n_train}, valid={n_valid}, calib={n_calib}, test={n_test})")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum([n_train, n_valid, n_calib])
    train, valid, calib, test = np.split(perm, cuts)
    return NodeSplit(train, valid, calib, test)


def generate_sbm(block_sizes: Sequence[int], p_in: float, p_out: float,
                 feature_dim: int | None = None, feature_noise: float = 1.0,
                 seed: int = 0) -> Graph:
    """Stochastic block model graph with noisy one-hot block features.

    Each unordered node pair is linked independently with probability
    ``p_in`` inside a block and ``p_out`` across blocks.  Node features are
    the one-hot block indicator (padded to ``feature_dim``) plus Gaussian
    noise with standard deviation ``feature_noise``; labels are block ids.
    """
    sizes = [int(b) for b in block_sizes]
    if not sizes or min(sizes) < 1:
        raise RankCPError("block_sizes must be a non-empty list of positive sizes")
    if not (0 <= p_in <= 1 and 0 <= p_out <= 1):
        raise RankCPError("p_in and p_out must lie in [0, 1]")
    k = len(sizes)
    feature_dim = k if feature_dim is None else int(feature_dim)
    if feature_dim < k:
        raise RankCPError(f"feature_dim {feature_dim} smaller than number of blocks {k}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), sizes)
    n = labels.size
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    features = np.zeros((n, feature_dim))
    features[np.arange(n), labels] = 1.0
    features += feature_noise * rng.standard_normal((n, feature_dim))
    return Graph(n, edges, features, labels, k)
