import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankcp.exceptions import NonFiniteError, RankCPError, ShapeError
from rankcp.tensor import OPS, Tape, backward, forward, grad_check, stable_sigmoid


def test_matmul_ones():
    tape = Tape()
    out = tape.apply("matmul", tape.constant(np.ones((2, 3))), tape.constant(np.ones((3, 1))))
    np.testing.assert_array_equal(tape.value(out), np.full((2, 1), 3.0))


def test_row_softmax_equal_entries():
    tape = Tape()
    out = tape.apply("row-softmax", tape.constant(np.full((1, 4), 7.0)))
    np.testing.assert_allclose(tape.value(out), [[0.25] * 4])


def test_sigmoid_zero():
    tape = Tape()
    assert tape.value(tape.apply("sigmoid", tape.constant([[0.0]])))[0, 0] == 0.5


def test_stable_sigmoid_extremes():
    out = stable_sigmoid(np.array([-1000.0, 1000.0, 0.0]))
    np.testing.assert_array_equal(out, [0.0, 1.0, 0.5])
    assert np.all(np.isfinite(out))


def test_forward_function_matches_apply():
    tape = Tape()
    a = tape.constant(np.eye(2))
    node = forward(tape, "transpose", [a])
    np.testing.assert_array_equal(tape.value(node), np.eye(2))


def test_mean_all_gradient():
    tape = Tape()
    w = tape.parameter(np.arange(4.0).reshape(2, 2))
    grads = backward(tape, tape.apply("mean-all", w))
    np.testing.assert_array_equal(grads[w], np.full((2, 2), 0.25))


def test_sum_sigmoid_gradient_at_zero():
    tape = Tape()
    w = tape.parameter(np.zeros((3, 2)))
    grads = backward(tape, tape.apply("sum-all", tape.apply("sigmoid", w)))
    np.testing.assert_allclose(grads[w], 0.25)


def test_composite_matches_finite_differences():
    rng = np.random.default_rng(3)
    tape = Tape()
    w = tape.parameter(rng.normal(size=(3, 3)))
    x = tape.constant(rng.normal(size=(3, 3)))
    loss = tape.apply("mean-all", tape.apply("sigmoid", tape.apply("matmul", x, w)))
    assert grad_check(tape, loss, 1e-5) < 1e-4


def test_linear_loss_grad_check_exact():
    tape = Tape()
    w = tape.parameter(np.arange(6.0).reshape(2, 3))
    loss = tape.apply("sum-all", tape.apply("scale-by-constant", w, c=3.0))
    assert grad_check(tape, loss) < 1e-8


def test_softmax_composite_grad_check():
    rng = np.random.default_rng(5)
    tape = Tape()
    w = tape.parameter(rng.normal(size=(4, 3)))
    x = tape.constant(rng.normal(size=(5, 4)))
    p = tape.apply("row-softmax", tape.apply("matmul", x, w))
    loss = tape.apply("mean-all", tape.apply("sigmoid", tape.apply("multiply", p, p)))
    assert grad_check(tape, loss) < 1e-4


@pytest.mark.parametrize("h", [0.0, -1e-5])
def test_grad_check_rejects_bad_step(h):
    tape = Tape()
    w = tape.parameter(np.ones((1, 1)))
    with pytest.raises(RankCPError):
        grad_check(tape, tape.apply("sum-all", w), h)


def test_shape_mismatch_rejected():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.apply("matmul", tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        tape.apply("add", tape.constant(np.ones((2, 3))), tape.constant(np.ones((3, 2))))


def test_row_broadcast_only():
    tape = Tape()
    a = tape.parameter(np.ones((3, 2)))
    b = tape.parameter(np.array([[1.0, 2.0]]))
    out = tape.apply("add", a, b)
    grads = backward(tape, tape.apply("sum-all", out))
    np.testing.assert_array_equal(grads[b], [[3.0, 3.0]])
    with pytest.raises(ShapeError):
        tape.apply("add", a, tape.constant(np.ones((3, 1))))


def test_non_finite_rejected():
    tape = Tape()
    with pytest.raises(NonFiniteError):
        tape.apply("log", tape.constant([[0.0]]))


def test_backward_needs_scalar_loss():
    tape = Tape()
    w = tape.parameter(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        backward(tape, w)


def test_unknown_op_rejected():
    with pytest.raises(RankCPError):
        Tape().apply("cosine", 0)


def test_unreachable_parameter_gets_zero_gradient():
    tape = Tape()
    used = tape.parameter(np.ones((1, 2)))
    unused = tape.parameter(np.ones((2, 2)))
    grads = backward(tape, tape.apply("sum-all", used))
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))


def test_gather_rows_gradient_accumulates_repeats():
    tape = Tape()
    w = tape.parameter(np.ones((3, 2)))
    g = tape.apply("gather-rows", w, index=[0, 0, 2])
    grads = backward(tape, tape.apply("sum-all", g))
    np.testing.assert_array_equal(grads[w], [[2, 2], [0, 0], [1, 1]])


def test_values_are_read_only():
    tape = Tape()
    w = tape.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        tape.value(w)[0, 0] = 5.0


def test_replay_after_set_value():
    tape = Tape()
    w = tape.parameter(np.ones((1, 1)))
    out = tape.apply("scale-by-constant", w, c=2.0)
    tape.set_value(w, [[4.0]])
    tape.replay()
    assert tape.value(out)[0, 0] == 8.0


UNARY_SMOOTH = ["row-softmax", "row-log-softmax", "sigmoid", "log", "transpose",
                "sum-all", "mean-all"]


@settings(max_examples=25, deadline=None)
@given(op=st.sampled_from(UNARY_SMOOTH), seed=st.integers(0, 10_000))
def test_unary_ops_gradients(op, seed):
    rng = np.random.default_rng(seed)
    tape = Tape()
    x = rng.uniform(0.2, 2.0, size=(3, 4))
    w = tape.parameter(x)
    out = tape.apply(op, w)
    weights = tape.constant(rng.normal(size=tape.value(out).shape))
    loss = tape.apply("sum-all", tape.apply("multiply", out, weights))
    assert grad_check(tape, loss) < 1e-4


@settings(max_examples=25, deadline=None)
@given(op=st.sampled_from(["add", "subtract", "multiply", "divide"]),
       seed=st.integers(0, 10_000), row=st.booleans())
def test_binary_ops_gradients(op, seed, row):
    rng = np.random.default_rng(seed)
    tape = Tape()
    a = tape.parameter(rng.uniform(0.5, 2.0, size=(3, 2)))
    b = tape.parameter(rng.uniform(0.5, 2.0, size=(1, 2) if row else (3, 2)))
    out = tape.apply(op, a, b)
    loss = tape.apply("sum-all", tape.apply("sigmoid", out))
    assert grad_check(tape, loss) < 1e-4


def test_every_op_registered_with_arity():
    for name, op in OPS.items():
        assert op.arity in (1, 2), name
