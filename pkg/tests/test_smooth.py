import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankcp.conformal import in_row_ranks
from rankcp.exceptions import RankCPError
from rankcp.smooth import (SmoothConfig, conformity_loss, smooth_aps_scores, smooth_quantile,
                           smooth_rank_scores, soft_set_size, total_loss, true_class_scores)
from rankcp.tensor import Tape, grad_check


def _scalar(tape, x):
    return tape.constant(np.array([[x]]))


def _value(tape, node):
    return tape.value(node)


def test_rank_scores_uniform_row():
    tape = Tape()
    v = smooth_rank_scores(tape, tape.constant(np.full((2, 4), 0.25)), tau=0.3)
    np.testing.assert_allclose(_value(tape, v), 2.0)


def test_rank_scores_two_classes():
    tape = Tape()
    v = smooth_rank_scores(tape, tape.constant([[0.8, 0.2]]), tau=0.1)
    expected = 0.5 + 1 / (1 + math.exp(6))
    assert _value(tape, v)[0, 0] == pytest.approx(expected)


def test_rank_scores_hard_limit():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(5), size=50)
    tape = Tape()
    v = _value(tape, smooth_rank_scores(tape, tape.constant(probs), tau=1e-3))
    gaps = np.diff(np.sort(probs, axis=1), axis=1).min(axis=1)
    ok = gaps > 0.01
    np.testing.assert_allclose(v[ok], in_row_ranks(probs)[ok] - 0.5, atol=0.01)


def test_aps_scores_uniform_row():
    tape = Tape()
    v = smooth_aps_scores(tape, tape.constant(np.full((1, 4), 0.25)), tau=1.0)
    np.testing.assert_allclose(_value(tape, v), 0.5 * 1.0)


def test_aps_scores_hard_limit():
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(4), size=50)
    tape = Tape()
    v = _value(tape, smooth_aps_scores(tape, tape.constant(probs), tau=1e-3))
    for i, row in enumerate(probs):
        if np.diff(np.sort(row)).min() <= 0.01:
            continue
        for k in range(4):
            below = row[row < row[k]].sum()
            assert v[i, k] == pytest.approx(below + 0.5 * row[k], abs=0.01)


def test_true_class_scores():
    tape = Tape()
    s = tape.constant([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(_value(tape, true_class_scores(tape, s, [1, 0])), [[2.0], [3.0]])


def test_quantile_constant_scores():
    tape = Tape()
    q = smooth_quantile(tape, tape.constant(np.full((7, 1), 0.4)), 0.3, tau=0.5)
    assert _value(tape, q)[0, 0] == pytest.approx(0.4, abs=1e-15)


def test_quantile_midpoint():
    tape = Tape()
    q = smooth_quantile(tape, tape.constant(np.arange(1.0, 6.0)[:, None]), 0.5, tau=1e-3)
    assert _value(tape, q)[0, 0] == pytest.approx(3.0, abs=1e-3)


def test_quantile_gradient():
    rng = np.random.default_rng(2)
    tape = Tape()
    s = tape.parameter(rng.normal(size=(12, 1)))
    q = smooth_quantile(tape, s, 0.2, tau=0.5)
    assert grad_check(tape, q) < 1e-4


@pytest.mark.parametrize("level", [0.0, 1.2])
def test_quantile_level_range(level):
    tape = Tape()
    with pytest.raises(RankCPError):
        smooth_quantile(tape, tape.constant(np.ones((3, 1))), level, tau=1.0)


@pytest.mark.parametrize("tau", [0.0, -0.5])
def test_tau_must_be_positive(tau):
    tape = Tape()
    with pytest.raises(RankCPError):
        smooth_rank_scores(tape, tape.constant([[0.5, 0.5]]), tau)


def test_soft_size_saturated_inside():
    tape = Tape()
    v = tape.constant([[0.1, 0.2, 0.3]])
    c = soft_set_size(tape, v, _scalar(tape, 100.0), tau=1.0, kappa=0)
    assert _value(tape, c)[0, 0] == pytest.approx(3.0)


def test_soft_size_saturated_outside_hinge():
    tape = Tape()
    v = tape.constant([[10.0, 20.0, 30.0]])
    c = soft_set_size(tape, v, _scalar(tape, -100.0), tau=1.0, kappa=1)
    assert _value(tape, c)[0, 0] == 0.0


def test_soft_size_memberships_sum_to_one_hinged():
    # memberships sigmoid(+z) and sigmoid(-z) add to exactly 1
    z = math.log(9.0)
    tape = Tape()
    v = tape.constant([[-z, z]])
    c = soft_set_size(tape, v, _scalar(tape, 0.0), tau=1.0, kappa=1)
    assert _value(tape, c)[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_soft_size_high_in_set_orientation():
    tape = Tape()
    v = tape.constant([[0.9, 0.1]])
    c = soft_set_size(tape, v, _scalar(tape, 0.5), tau=1e-3, kappa=0, low_in_set=False)
    assert _value(tape, c)[0, 0] == pytest.approx(1.0)


def test_conformity_loss_examples():
    tape = Tape()
    assert _value(tape, conformity_loss(tape, tape.constant(np.zeros((4, 1))), 3))[0, 0] == 0
    loss = conformity_loss(tape, tape.constant([[3.0], [1.0]]), 4)
    assert _value(tape, loss)[0, 0] == pytest.approx(0.5)
    scaled = conformity_loss(tape, tape.constant([[6.0], [2.0]]), 4)
    assert _value(tape, scaled)[0, 0] == pytest.approx(1.0)


def test_total_loss():
    tape = Tape()
    pred, cp = _scalar(tape, 0.7), _scalar(tape, 0.5)
    assert _value(tape, total_loss(tape, pred, cp, 1.0))[0, 0] == pytest.approx(1.2)
    assert _value(tape, total_loss(tape, pred, cp, 0.0))[0, 0] == pytest.approx(0.7)
    assert _value(tape, total_loss(tape, pred, cp, 10.0))[0, 0] == pytest.approx(5.7)
    with pytest.raises(RankCPError):
        total_loss(tape, pred, cp, -1.0)


def test_smooth_config_validation():
    SmoothConfig(tau=0.5)
    for tau in (1e-4, 11.0):
        with pytest.raises(RankCPError):
            SmoothConfig(tau=tau)
    with pytest.raises(RankCPError):
        SmoothConfig(kappa=2)
    with pytest.raises(RankCPError):
        SmoothConfig(alpha=1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), tau=st.sampled_from([0.1, 0.5, 1.0]),
       aps=st.booleans())
def test_score_gradients(seed, tau, aps):
    rng = np.random.default_rng(seed)
    tape = Tape()
    logits = tape.parameter(rng.normal(size=(6, 4)))
    probs = tape.apply("row-softmax", logits)
    scores = (smooth_aps_scores if aps else smooth_rank_scores)(tape, probs, tau)
    w = tape.constant(rng.normal(size=(6, 4)))
    loss = tape.apply("sum-all", tape.apply("multiply", scores, w))
    assert grad_check(tape, loss) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_rank_scores_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(5), size=3)
    perm = rng.permutation(5)
    tape = Tape()
    a = _value(tape, smooth_rank_scores(tape, tape.constant(probs), 0.2))
    b = _value(tape, smooth_rank_scores(tape, tape.constant(probs[:, perm]), 0.2))
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)
