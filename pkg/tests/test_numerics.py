import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from kala import numerics as nx
from kala.errors import ContractError, DegenerateRowError, DimensionError, NumericError
from kala.layers import MLP
from kala.numerics import Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def check_gradient(f, params, tol=1e-6):
    loss = f()
    for p in params:
        p.grad = None
    nx.backward(loss)
    with nx.no_grad():
        numeric = nx.finite_difference_gradient(lambda: f().item(), params)
    for p, num in zip(params, numeric):
        assert nx.relative_error(p.grad, num) < tol


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nx.matmul(np.eye(2), x).data, x)


def test_matmul_small_product():
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    check_gradient(lambda: nx.tsum(nx.matmul(a, b)), [a, b])


def test_batched_matmul_broadcast_gradient(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    check_gradient(lambda: nx.tsum(nx.mul(nx.matmul(a, b), nx.matmul(a, b))), [a, b])


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_two_values():
    out = nx.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_gradient(rng):
    x, g, b = leaf(rng, 3, 5), leaf(rng, 5), leaf(rng, 5)
    w = rng.normal(size=(3, 5))
    check_gradient(lambda: nx.tsum(nx.mul(nx.layer_norm(x, g, b), w)), [x, g, b], tol=1e-5)


def test_layer_norm_rejects_bad_gain():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 10_000))
def test_layer_norm_rows_standardised(d, rows, seed):
    x = np.random.default_rng(seed).normal(size=(rows, d)) * 10 + 1
    assume(x.var(axis=-1).min() > 10)  # eps = 1e-5 shifts the variance by eps / var
    out = nx.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-9)
    assert np.all(np.abs(out.var(axis=-1) - 1) < 1e-6)


# -- softmax ------------------------------------------------------------------

def test_softmax_symmetric():
    assert nx.softmax_rows(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_softmax_hand_computed():
    out = nx.softmax_rows(Tensor([math.log(2), 0.0, 0.0])).data
    np.testing.assert_allclose(out, [0.5, 0.25, 0.25], rtol=1e-15)


def test_softmax_single_survivor():
    out = nx.softmax_rows(Tensor([5.0, 5.0]), mask=[True, False]).data
    assert out.tolist() == [1.0, 0.0]


def test_softmax_fully_masked_row():
    with pytest.raises(DegenerateRowError):
        nx.softmax_rows(Tensor(np.zeros((2, 3))), mask=[[True, False, False], [False] * 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    r = np.random.default_rng(seed)
    mask = r.random((rows, cols)) < 0.6
    mask[:, 0] = True
    out = nx.softmax_rows(Tensor(r.normal(size=(rows, cols)) * 10), mask).data
    assert np.all(np.abs(out.sum(axis=-1) - 1) < 1e-12)
    assert np.all(out[~mask] == 0.0)


def test_softmax_gradient(rng):
    x = leaf(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    mask = np.array([[1, 1, 0, 1], [1, 1, 1, 1], [0, 1, 0, 0]], dtype=bool)
    check_gradient(lambda: nx.tsum(nx.mul(nx.softmax_rows(x, mask), w)), [x])


# -- backward -----------------------------------------------------------------

def test_half_square_gradient_is_input():
    x = Tensor([1.5, -2.0, 0.25], requires_grad=True)
    nx.backward(nx.scale(nx.tsum(nx.mul(x, x)), 0.5))
    assert np.array_equal(x.grad, x.data)


def test_mlp_gradient(rng):
    mlp = MLP(4, 6, 3, rng)
    for p in mlp.parameters():
        p.data += rng.normal(size=p.shape) * 0.5
    x = rng.normal(size=(5, 4))
    check_gradient(lambda: nx.tsum(nx.mul(mlp(x), mlp(x))), mlp.parameters(), tol=1e-5)


def test_backward_replays_bit_identically(rng):
    mlp = MLP(4, 6, 3, rng)
    x = rng.normal(size=(5, 4))
    grads = []
    for _ in range(2):
        mlp.zero_grad()
        nx.backward(nx.tsum(nx.gelu(mlp(x))))
        grads.append([p.grad.copy() for p in mlp.parameters()])
    for a, b in zip(*grads):
        assert np.array_equal(a, b)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        nx.backward(nx.mul(x, 2.0))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = nx.mul(x, 2.0)
    assert not y.requires_grad


PRIMITIVES = {
    "add": lambda a, b: nx.add(a, b),
    "sub": lambda a, b: nx.sub(a, b),
    "mul": lambda a, b: nx.mul(a, b),
    "relu": lambda a, b: nx.relu(nx.add(a, 0.3)),
    "leaky_relu": lambda a, b: nx.leaky_relu(a),
    "gelu": lambda a, b: nx.gelu(a),
    "concat": lambda a, b: nx.concat([a, b], axis=0),
    "transpose": lambda a, b: nx.matmul(nx.transpose(a), b),
    "reshape": lambda a, b: nx.reshape(a, (-1,)),
    "take_rows": lambda a, b: nx.take_rows(a, np.array([2, 0, 2, 1])),
    "mean": lambda a, b: nx.mean(nx.mul(a, b), axis=0),
    "segment_sum": lambda a, b: nx.segment_sum(a, np.array([1, 0, 1]), 3),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), cols=st.integers(1, 4))
def test_primitive_gradients(name, seed, cols):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=(3, cols)), requires_grad=True)
    b = Tensor(r.normal(size=(3, cols)), requires_grad=True)
    op = PRIMITIVES[name]
    out = op(a, b)
    w = r.normal(size=out.shape)
    params = [a, b] if name in ("add", "sub", "mul", "concat", "transpose", "mean") else [a]
    f = lambda: nx.tsum(nx.mul(op(a, b), w))
    loss = f()
    nx.backward(loss)
    with nx.no_grad():
        numeric = nx.finite_difference_gradient(lambda: f().item(), params)
    for p, num in zip(params, numeric):
        assert nx.relative_error(p.grad, num) < 1e-4


def test_cross_entropy_and_segment_softmax_gradients(rng):
    logits = leaf(rng, 4, 5)
    check_gradient(lambda: nx.cross_entropy(logits, [0, 3, 2, 4]), [logits])
    scores = leaf(rng, 6)
    seg = np.array([0, 0, 1, 1, 1, 2])
    mask = np.array([True, True, True, False, True, True])
    w = rng.normal(size=6)
    check_gradient(lambda: nx.tsum(nx.mul(nx.segment_softmax(scores, seg, 3, mask), w)), [scores])


# -- finite differences -------------------------------------------------------

def test_finite_difference_square():
    x = Tensor([3.0])
    (g,) = nx.finite_difference_gradient(lambda: x.data[0] ** 2, [x], h=1e-5)
    assert abs(g[0] - 6.0) < 1e-6


@pytest.mark.parametrize("h", [2.0 ** -4, 2.0 ** -12, 1.0])
def test_finite_difference_linear_exact(h):
    x = Tensor([0.5, -1.0])
    (g,) = nx.finite_difference_gradient(lambda: 2.0 * x.data[0] - 4.0 * x.data[1], [x], h=h)
    assert g.tolist() == [2.0, -4.0]


def test_finite_difference_non_finite():
    x = Tensor([0.0])
    with pytest.raises(NumericError):
        nx.finite_difference_gradient(lambda: math.sqrt(x.data[0]) if x.data[0] >= 0 else math.nan, [x])


def test_finite_difference_agrees_with_backward_on_two_layer_mlp(rng):
    mlp = MLP(3, 5, 2, rng)
    for p in mlp.parameters():
        p.data += rng.normal(size=p.shape) * 0.3
    x = rng.normal(size=(4, 3))
    check_gradient(lambda: nx.tsum(nx.mul(mlp(x), mlp(x))), mlp.parameters(), tol=1e-4)
