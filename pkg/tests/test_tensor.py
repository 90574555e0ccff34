import numpy as np
import pytest

from hrm_text import tensor as T
from hrm_text.errors import ContractError
from hrm_text.errors import DegenerateRowError
from hrm_text.errors import DimensionError
from hrm_text.errors import NonFiniteError


def test_identity_matmul(double, rng):
    a = T.Tensor(rng.normal(size=(3, 4)))
    out = T.Tensor(np.eye(3)) @ a
    np.testing.assert_array_equal(out.data, a.data)


def test_precision_context_sets_dtype():
    with T.precision(64):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32


def test_matmul_gradient_is_row_sums(double, rng):
    a = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with T.Tape() as tape:
        loss = (a @ b).sum()
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads.of(a), np.tile(b.data.sum(axis=1), (2, 1)))
    np.testing.assert_allclose(grads.of(b), np.tile(a.data.sum(axis=0)[:, None], (1, 4)))


def test_matmul_gradcheck(double, rng):
    a = T.Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    assert T.gradcheck(lambda: ((a @ b) * (a @ b)).sum(), [a, b]) < 1e-6


def test_pointwise_values_at_zero():
    zero = T.Tensor([0.0])
    assert T.sigmoid(zero).item() == pytest.approx(0.5)
    assert T.silu(zero).item() == 0.0


def test_sigmoid_derivative_at_zero(double):
    x = T.Tensor([0.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.sigmoid(x).sum()
    assert tape.backward(loss).of(x)[0] == pytest.approx(0.25)


def test_incompatible_broadcast_raises():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(2)))


def test_leading_and_trailing_expansion_gradients(double, rng):
    x = T.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    row = T.Tensor(rng.normal(size=(3,)), requires_grad=True)
    column = T.Tensor(rng.normal(size=(2, 1)), requires_grad=True)
    with T.Tape() as tape:
        loss = ((x + row) * column).sum()
    grads = tape.backward(loss)
    assert grads.of(row).shape == (3,)
    assert grads.of(column).shape == (2, 1)
    np.testing.assert_allclose(grads.of(row), np.full(3, column.data.sum()))
    np.testing.assert_allclose(grads.of(column)[:, 0], (x.data + row.data).sum(axis=1))


def test_masked_softmax_rows():
    logits = T.Tensor(np.zeros((1, 4)))
    probs = T.masked_softmax(logits, np.ones((1, 4), dtype=bool))
    np.testing.assert_allclose(probs.data, 0.25)

    one = T.masked_softmax(T.Tensor([[3.0, -2.0, 7.0]]), np.array([[False, True, False]]))
    np.testing.assert_array_equal(one.data, [[0.0, 1.0, 0.0]])


def test_masked_entries_are_exactly_zero(rng):
    mask = np.tril(np.ones((4, 4), dtype=bool))
    probs = T.masked_softmax(T.Tensor(rng.normal(size=(4, 4))), mask).data
    assert np.all(probs[~mask] == 0.0)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=1e-6)


def test_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        T.masked_softmax(T.Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))


def test_non_finite_result_names_the_op():
    with np.errstate(divide='ignore'):
        with pytest.raises(NonFiniteError, match='rsqrt'):
            T.rsqrt(T.Tensor([0.0]))


def test_no_grad_records_nothing():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            (x * x).sum()
    assert tape.records == []


def test_detach_blocks_gradient(double):
    x = T.Tensor([1.5, -2.0], requires_grad=True)
    with T.Tape() as tape:
        loss = (T.detach(x) * x).sum()
    np.testing.assert_array_equal(tape.backward(loss).of(x), x.data)


def test_backward_needs_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        out = x * x
    with pytest.raises(ContractError):
        tape.backward(out)


def test_item_needs_a_single_element():
    assert T.Tensor([[2.5]]).item() == 2.5
    with pytest.raises(ContractError):
        T.Tensor([1.0, 2.0]).item()
    with pytest.raises(ContractError):
        T.Tensor(np.zeros((0,))).item()


def test_log_softmax_pick_gradcheck(double, rng):
    x = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    index = np.array([0, 4, 2])
    assert T.gradcheck(lambda: T.take_last(T.log_softmax(x), index).sum(), [x]) < 1e-6


def test_embedding_accumulates_repeated_ids(double):
    weight = T.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    with T.Tape() as tape:
        loss = T.embedding(weight, np.array([0, 0, 1])).sum()
    np.testing.assert_array_equal(tape.backward(loss).of(weight), [[2.0, 2.0], [1.0, 1.0], [0.0, 0.0]])


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(DimensionError):
        T.embedding(T.Tensor(np.zeros((3, 2))), np.array([3]))


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        T.elementwise('tanh', T.Tensor([0.0]))
