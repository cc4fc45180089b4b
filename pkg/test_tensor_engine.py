"""
Tests for the tensor engine: op values, error contracts, backward and
finite-difference agreement
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exceptions import ContractError, DimensionError, NumericError
from tensor_engine import (
    ComputeGraph,
    Tensor,
    add,
    backward,
    cross_entropy,
    elementwise,
    gather,
    gradient_check,
    log_softmax_rows,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    rms_norm,
    scale,
    softmax_rows,
    track_allocations,
    transpose,
)
from tensor_engine import sum as tsum

F64 = "float64"


def t64(values, grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=grad)


finite_rows = arrays(
    np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
    elements=st.floats(-30, 30, allow_nan=False, allow_infinity=False),
)


# matmul

def test_matmul_identity_and_zero():
    A = t64([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(matmul(t64(np.eye(2)), A).data, A.data)
    assert np.array_equal(matmul(t64(np.zeros((2, 2))), A).data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop():
    a = [[1, 2], [3, 4]]
    b = [[5, 6], [7, 8]]
    expected = [[sum(a[i][k] * b[k][j] for k in range(2)) for j in range(2)] for i in range(2)]
    assert np.array_equal(matmul(t64(a), t64(b)).data, np.array(expected, dtype=float))
    assert expected == [[19, 22], [43, 50]]


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as info:
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))
    assert "(2, 3) vs (2, 3)" in str(info.value)


def test_batched_matmul_against_weight_matrix():
    rng = np.random.default_rng(0)
    X = t64(rng.normal(size=(3, 4, 5)))
    W = t64(rng.normal(size=(5, 2)))
    out = matmul(X, W).data
    for b in range(3):
        np.testing.assert_allclose(out[b], X.data[b] @ W.data, rtol=0, atol=1e-14)


# softmax

def test_softmax_of_zeros_is_uniform():
    out = softmax_rows(t64(np.zeros((4, 4)))).data
    np.testing.assert_allclose(out, np.full((4, 4), 0.25), rtol=0, atol=1e-15)


def test_softmax_closed_form_row():
    out = softmax_rows(t64([[0.0, np.log(3.0)]])).data
    np.testing.assert_allclose(out, [[0.25, 0.75]], rtol=0, atol=1e-15)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        softmax_rows(t64([[0.0, np.nan]]))


def test_softmax_mask_zeroes_dropped_cells():
    mask = np.triu(np.ones((3, 3), dtype=bool))
    out = softmax_rows(t64(np.zeros((3, 3))), mask=mask).data
    np.testing.assert_allclose(out[0], [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(out[2], [0.0, 0.0, 1.0])
    assert np.all(out[~mask] == 0.0)


def test_softmax_large_logits_stay_finite():
    out = softmax_rows(t64([[1000.0, 0.0], [-1000.0, -999.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=1), 1.0)


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    out = softmax_rows(Tensor(x)).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(out >= 0)


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.floats(-20, 20))
def test_softmax_shift_invariance(x, shift):
    a = softmax_rows(Tensor(x)).data
    b = softmax_rows(Tensor(x + shift)).data
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_softmax_rows_sum_to_one_at_32_bit():
    x = Tensor(np.random.default_rng(3).normal(size=(16, 16)).astype(np.float32))
    out = softmax_rows(x).data
    assert out.dtype == np.float32
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-6)


# relu / elementwise

def test_relu_values_and_gradient_mask():
    x = t64([-1.0, 0.0, 2.0], grad=True)
    out = relu(x)
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])
    backward(tsum(out))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_relu_all_negative_is_zero():
    assert np.array_equal(relu(t64([-3.0, -0.5])).data, [0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(finite_rows)
def test_elementwise_identities(x):
    A = Tensor(x)
    assert np.array_equal(mul(A, Tensor(np.ones_like(x))).data, x)
    assert np.array_equal(mul(A, Tensor(np.zeros_like(x))).data, np.zeros_like(x))
    assert np.array_equal(add(A, Tensor(np.zeros_like(x))).data, x)


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        elementwise(t64(np.ones((2, 3))), t64(np.ones((3, 2))), "add")


def test_elementwise_unknown_kind():
    with pytest.raises(ContractError):
        elementwise(t64([1.0]), t64([1.0]), "sub")


def test_mul_backward_routes_other_operand():
    a = t64([1.0, 2.0], grad=True)
    b = t64([3.0, -4.0], grad=True)
    backward(tsum(mul(a, b)))
    assert np.array_equal(a.grad, b.data)
    assert np.array_equal(b.grad, a.data)


def test_row_vector_broadcast_gradient_sums_rows():
    X = t64(np.ones((3, 2)))
    bias = t64([0.5, -0.5], grad=True)
    backward(tsum(add(X, bias)))
    assert np.array_equal(bias.grad, [3.0, 3.0])


# backward

def test_backward_of_sum_is_ones():
    x = t64(np.arange(6.0).reshape(2, 3), grad=True)
    backward(tsum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_sum_of_squares_is_2x():
    x = t64([[1.0, -2.0], [0.5, 3.0]], grad=True)
    backward(tsum(mul(x, x)))
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar_loss():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ContractError):
        backward(scale(x, 2.0))


def test_backward_rejects_loss_outside_graph():
    x = t64([1.0, 2.0], grad=True)
    graph = ComputeGraph.trace(tsum(x))
    with pytest.raises(ContractError):
        backward(mean(x), graph=graph)


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    data = rng.uniform(-1, 1, (4, 4))
    grads = []
    for _ in range(2):
        W = t64(data, grad=True)
        loss = mean(softmax_rows(matmul(W, transpose(W))))
        backward(loss)
        grads.append(W.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_graph_order_is_topological():
    x = t64([[1.0, 2.0]], grad=True)
    out = tsum(relu(scale(x, 3.0)))
    graph = ComputeGraph.trace(out)
    position = {record.node_id: i for i, record in enumerate(graph.nodes)}
    for record in graph.nodes:
        assert all(position[p] < position[record.node_id] for p in record.input_ids)
    assert graph.leaves() == [x]


def test_no_grad_builds_no_graph():
    x = t64([1.0, 2.0], grad=True)
    with no_grad():
        out = scale(x, 2.0)
    assert not out.requires_grad
    assert out.is_leaf


def test_non_finite_result_raises():
    with pytest.raises(NumericError):
        scale(t64([1e308]), 1e10)


# finite differences

def test_three_layer_composite_matches_central_differences():
    rng = np.random.default_rng(11)
    X = t64(rng.uniform(-1, 1, (4, 3)), grad=True)
    W1 = t64(rng.uniform(-1, 1, (3, 5)), grad=True)
    W2 = t64(rng.uniform(-1, 1, (5, 4)), grad=True)
    W3 = t64(rng.uniform(-1, 1, (4, 2)), grad=True)

    def fn(inputs):
        x, w1, w2, w3 = inputs
        h = relu(matmul(x, w1))
        a = softmax_rows(matmul(h, w2))
        return mean(mul(matmul(a, w3), matmul(a, w3)))

    errors = gradient_check(fn, [X, W1, W2, W3], h=1e-5)
    assert set(errors) == {0, 1, 2, 3}
    assert max(errors.values()) < 1e-4


@pytest.mark.parametrize("op", ["softmax", "log_softmax", "rms_norm", "gather", "cross_entropy", "masked_softmax"])
def test_op_gradients_match_central_differences(op):
    rng = np.random.default_rng(7)
    x = t64(rng.uniform(-1, 1, (3, 4)), grad=True)
    weights = t64(rng.uniform(-1, 1, (3, 4)))
    gain = t64(rng.uniform(0.5, 1.5, 4), grad=True)
    targets = np.array([0, 3, 1])
    index = np.array([[0, 2], [1, 1]])
    mask = np.triu(np.ones((3, 4), dtype=bool))

    def fn(inputs):
        if op == "softmax":
            return tsum(mul(softmax_rows(inputs[0]), weights))
        if op == "masked_softmax":
            return tsum(mul(softmax_rows(inputs[0], mask=mask), weights))
        if op == "log_softmax":
            return tsum(mul(log_softmax_rows(inputs[0]), weights))
        if op == "rms_norm":
            return tsum(mul(rms_norm(inputs[0], inputs[1]), weights))
        if op == "gather":
            return tsum(mul(gather(inputs[0], index), gather(inputs[0], index)))
        return cross_entropy(inputs[0], targets)

    inputs = [x, gain] if op == "rms_norm" else [x]
    errors = gradient_check(fn, inputs)
    assert max(errors.values()) < 1e-4


def test_cross_entropy_of_uniform_logits_is_log_labels():
    logits = t64(np.zeros((2, 3, 5)))
    loss = cross_entropy(logits, np.zeros((2, 3), dtype=np.int64))
    assert loss.item() == pytest.approx(np.log(5.0), abs=1e-12)


def test_gather_scatter_adds_repeated_indices():
    v = t64([1.0, 2.0, 3.0], grad=True)
    backward(tsum(gather(v, np.array([[0, 0], [2, 0]]))))
    assert np.array_equal(v.grad, [3.0, 0.0, 1.0])


# allocation counter

def test_allocation_counter_tracks_peak():
    with track_allocations() as counter:
        a = Tensor(np.zeros(1000, dtype=np.float64))
        b = Tensor(np.zeros(500, dtype=np.float64))
        del a, b
    assert counter.peak_bytes == 1500 * 8
    assert counter.allocations == 2
    assert counter.total_bytes == 1500 * 8
