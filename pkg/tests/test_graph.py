import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankcp.exceptions import RankCPError
from rankcp.graph import (Graph, generate_sbm, load_dataset, normalized_adjacency, save_dataset,
                          split_nodes)


def _write(tmp_path, features, edges, labels, k):
    f = tmp_path / "features.csv"
    e = tmp_path / "edges.csv"
    y = tmp_path / "labels.csv"
    d = len(features[0])
    f.write_text(f"node_features,d={d}\n" + "".join(",".join(map(str, r)) + "\n" for r in features))
    e.write_text("".join(f"{a},{b}\n" for a, b in edges))
    y.write_text(f"labels,k={k}\n" + "".join(f"{v}\n" for v in labels))
    return f, e, y


def test_load_dedups_reversed_and_repeated_edges(tmp_path):
    paths = _write(tmp_path, [[0.0], [1.0], [2.0]], [(0, 1), (1, 2), (1, 0), (1, 0)], [0, 1, 0], 2)
    g = load_dataset(*paths)
    assert g.n_edges == 2
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_load_empty_edge_file(tmp_path):
    paths = _write(tmp_path, [[0.0]] * 5, [], [0] * 5, 1)
    g = load_dataset(*paths)
    assert g.n_nodes == 5 and g.n_edges == 0


def test_out_of_range_edge_names_line(tmp_path):
    paths = _write(tmp_path, [[0.0]] * 10, [(0, 1), (2, 99)], [0] * 10, 1)
    with pytest.raises(RankCPError, match=r"edges.csv:2"):
        load_dataset(*paths)


def test_label_outside_k_rejected(tmp_path):
    paths = _write(tmp_path, [[0.0]] * 2, [], [0, 3], 2)
    with pytest.raises(RankCPError, match="labels.csv:3"):
        load_dataset(*paths)


def test_label_count_mismatch_rejected(tmp_path):
    paths = _write(tmp_path, [[0.0]] * 3, [], [0, 1], 2)
    with pytest.raises(RankCPError, match="2 labels but 3"):
        load_dataset(*paths)


def test_bad_feature_header_rejected(tmp_path):
    f, e, y = _write(tmp_path, [[0.0]], [], [0], 1)
    f.write_text("x,y\n1,2\n")
    with pytest.raises(RankCPError, match="node_features"):
        load_dataset(f, e, y)


def test_save_load_round_trip(tmp_path):
    g = generate_sbm([5, 6], 0.5, 0.1, feature_dim=3, seed=4)
    save_dataset(g, tmp_path)
    back = load_dataset(tmp_path / "features.csv", tmp_path / "edges.csv", tmp_path / "labels.csv")
    assert back == g


def test_self_loops_dropped():
    g = Graph(2, np.array([[0, 0], [0, 1]]), np.zeros((2, 1)), np.array([0, 0]), 1)
    assert g.n_edges == 1


def test_adjacency_isolated_node():
    g = Graph(1, np.zeros((0, 2), dtype=int), np.zeros((1, 1)), np.array([0]), 1)
    np.testing.assert_array_equal(normalized_adjacency(g), [[1.0]])


def test_adjacency_single_edge():
    g = Graph(2, np.array([[0, 1]]), np.zeros((2, 1)), np.array([0, 0]), 1)
    np.testing.assert_allclose(normalized_adjacency(g), np.full((2, 2), 0.5))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(1, 30))
def test_adjacency_symmetric(seed, n):
    g = generate_sbm([n], 0.3, 0.0, seed=seed)
    a = normalized_adjacency(g)
    assert np.max(np.abs(a - a.T)) < 1e-12
    # spectral radius of the normalized operator is at most 1
    assert np.max(np.abs(np.linalg.eigvalsh(a))) <= 1 + 1e-9


def test_split_sizes():
    assert split_nodes(100, (0.2, 0.1, 0.7), 0.5, seed=0).sizes == (20, 10, 35, 35)


def test_split_deterministic_and_disjoint():
    a = split_nodes(57, seed=3)
    b = split_nodes(57, seed=3)
    for name in ("train", "valid", "calib", "test"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    everything = np.concatenate([a.train, a.valid, a.calib, a.test])
    assert sorted(everything.tolist()) == list(range(57))


@pytest.mark.parametrize("ratios", [(1.0, 0.0, 0.0), (0.5, 0.6, -0.1), (0.2, 0.2, 0.2)])
def test_split_bad_ratios(ratios):
    with pytest.raises(RankCPError):
        split_nodes(100, ratios)


def test_split_too_small():
    with pytest.raises(RankCPError, match="empty"):
        split_nodes(4)


def test_sbm_deterministic_corners():
    g = generate_sbm([2, 2], 1.0, 0.0, seed=0)
    assert g.edges.tolist() == [[0, 1], [2, 3]]


def test_sbm_same_seed_same_edges():
    a = generate_sbm([20, 20], 0.3, 0.05, seed=9)
    b = generate_sbm([20, 20], 0.3, 0.05, seed=9)
    np.testing.assert_array_equal(a.edges, b.edges)
    assert a == b


def test_sbm_within_block_counts_binomial():
    # Binomial oracle: each block has C(50, 2) = 1225 pairs at p_in = 0.2,
    # mean 245 per block and 490 over both blocks.
    pairs = math.comb(50, 2)
    for seed in range(5):
        g = generate_sbm([50, 50], 0.2, 0.02, seed=seed)
        same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
        for block in (0, 1):
            count = int((same & (g.labels[g.edges[:, 0]] == block)).sum())
            sd = math.sqrt(pairs * 0.2 * 0.8)
            assert abs(count - 245) <= 3 * sd
        total_sd = math.sqrt(2 * pairs * 0.2 * 0.8)
        assert abs(int(same.sum()) - 490) <= 3 * total_sd
        cross = int((~same).sum())
        assert abs(cross - 2500 * 0.02) <= 3 * math.sqrt(2500 * 0.02 * 0.98)


def test_sbm_rejects_bad_probability():
    with pytest.raises(RankCPError):
        generate_sbm([3], 1.5, 0.0)
