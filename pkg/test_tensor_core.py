import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.errors import DimensionError, NumericError
from src.tensor_core import (
    AdamState, Tape, Tensor, adam_step, backward, clip_grad_norm, concat, conv1d, counter_rng,
    dropout, exp, gradient_check, log, matmul, maxpool1d, parameter, relu, same_padding, sigmoid,
    softmax, stack, tanh,
)


@pytest.fixture
def rng():
    return counter_rng(1234)


def test_counter_rng_streams_are_reproducible_and_distinct():
    a = counter_rng(7, 1).standard_normal(5)
    b = counter_rng(7, 1).standard_normal(5)
    c = counter_rng(7, 2).standard_normal(5)
    assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_broadcast_add_unbroadcasts_gradient():
    x = parameter(np.ones((2, 3)))
    b = parameter(np.zeros(3))
    with Tape() as tape:
        loss = (x + b).sum()
    grads = backward(tape, loss)
    assert_array_equal(grads[b], [2.0, 2.0, 2.0])
    assert_array_equal(grads[x], np.ones((2, 3)))


def test_disconnected_parameter_gets_zero_gradient():
    x = parameter([1.0, 2.0])
    unused = parameter([[3.0]])
    with Tape() as tape:
        loss = (x * x).sum()
    grads = backward(tape, loss).collect({"x": x, "unused": unused})
    assert_array_equal(grads["x"], [2.0, 4.0])
    assert_array_equal(grads["unused"], [[0.0]])


def test_reused_tensor_accumulates_gradient():
    x = parameter(3.0)
    with Tape() as tape:
        loss = x * x + x
    assert backward(tape, loss)[x] == pytest.approx(7.0)


def test_no_tape_means_no_recording():
    x = parameter([1.0])
    y = x * 2.0
    assert y.node_id is None
    assert_array_equal(y.data, [2.0])


def test_softmax_is_stable_and_normalised():
    out = softmax(Tensor([[1000.0, 1000.0], [0.0, np.log(3.0)]]), axis=1)
    assert_allclose(out.data, [[0.5, 0.5], [0.25, 0.75]], atol=1e-12)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_log_of_nonpositive_raises_numeric_error():
    with pytest.raises(NumericError):
        log(Tensor([0.0, 1.0]))


def test_same_padding_splits_extra_zero_to_the_right():
    assert same_padding(8) == (3, 4)
    assert same_padding(6) == (2, 3)
    assert same_padding(1) == (0, 0)


def test_conv1d_same_padding_known_values():
    x = Tensor([[1.0, 2.0, 3.0]])
    k = Tensor([[[1.0, 1.0]]])
    assert_array_equal(conv1d(x, k, padding="same").data, [[3.0, 5.0, 3.0]])
    assert_array_equal(conv1d(x, k, padding="valid").data, [[3.0, 5.0]])


def test_conv1d_keeps_length_for_stride_one(rng):
    x = Tensor(rng.standard_normal((3, 17)))
    k = Tensor(rng.standard_normal((5, 3, 8)))
    assert conv1d(x, k, padding="same").shape == (5, 17)


def test_maxpool_routes_ties_to_first_occurrence():
    x = parameter([[1.0, 1.0, 0.0, 0.0]])
    with Tape() as tape:
        out = maxpool1d(x, 2, 2)
        loss = out.sum()
    assert_array_equal(out.data, [[1.0, 0.0]])
    assert_array_equal(backward(tape, loss)[x], [[1.0, 0.0, 1.0, 0.0]])


def test_dropout_identity_in_eval_and_scaled_in_train(rng):
    x = Tensor(np.ones((4, 50)))
    assert dropout(x, 0.5, train_mode=False, rng=None) is x
    out = dropout(x, 0.5, train_mode=True, rng=rng).data
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_concat_and_stack_split_gradients(rng):
    a, b = parameter(rng.standard_normal((2, 3))), parameter(rng.standard_normal((2, 2)))
    with Tape() as tape:
        loss = (concat([a, b], axis=1) * 2.0).sum() + stack([a, a]).sum()
    grads = backward(tape, loss)
    assert_array_equal(grads[a], np.full((2, 3), 4.0))
    assert_array_equal(grads[b], np.full((2, 2), 2.0))


@pytest.mark.parametrize("case", range(5))
def test_elementwise_gradients_match_finite_differences(case):
    rng = counter_rng(99, case)
    x = parameter(rng.standard_normal((3, 4)))
    w = rng.standard_normal((3, 4))

    def fn(x):
        return ((tanh(x) + sigmoid(x) * exp(x * 0.1) + relu(x)) * w).sum()

    assert gradient_check(fn, [x]) < 1e-6


@pytest.mark.parametrize("case", range(5))
def test_conv_and_pool_gradients_match_finite_differences(case):
    rng = counter_rng(5, case)
    x = parameter(rng.standard_normal((2, 20)))
    k = parameter(rng.standard_normal((3, 2, 5)))
    b = parameter(rng.standard_normal(3))
    w = rng.standard_normal((3, 4))

    def fn(x, k, b):
        return (maxpool1d(conv1d(x, k, bias=b), 5, 5) * w).sum()

    assert gradient_check(fn, [x, k, b]) < 1e-5


def test_adam_step_first_update_is_learning_rate_sized():
    p = parameter([1.0])
    state = AdamState(learning_rate=0.1)
    adam_step({"p": p}, {"p": np.array([2.0])}, state)
    assert state.t == 1
    assert p.data[0] == pytest.approx(0.9, abs=1e-7)


def test_adam_with_zero_learning_rate_leaves_parameters_bit_identical(rng):
    start = rng.standard_normal((3, 3))
    p = parameter(start.copy())
    state = AdamState(learning_rate=0.0)
    for _ in range(3):
        adam_step({"p": p}, {"p": rng.standard_normal((3, 3))}, state)
    assert_array_equal(p.data, start)


def test_adam_rejects_mismatched_gradient_shape():
    with pytest.raises(DimensionError):
        adam_step({"p": parameter([1.0, 2.0])}, {"p": np.zeros(3)}, AdamState())


def test_clip_grad_norm_rescales_only_above_threshold():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = clip_grad_norm(grads, 1.0)
    assert_allclose(clipped["a"], [0.6])
    assert_allclose(clipped["b"], [0.8])
    assert clip_grad_norm(grads, 10.0) is grads
