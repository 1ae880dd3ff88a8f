import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from plugtagger import diffcore as dc
from plugtagger.diffcore import Tensor
from plugtagger.errors import ContractError, NumericError, ShapeError


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def rand(rng, *shape):
    return rng.uniform(-2, 2, size=shape)


# --- softmax_rows -----------------------------------------------------------


def test_softmax_rows_symmetric_pair():
    out = dc.softmax_rows(t64([[1.0, 1.0]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)


def test_softmax_rows_uniform_triple():
    out = dc.softmax_rows(t64([[0.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)


def test_softmax_rows_matches_extended_precision():
    getcontext().prec = 50
    row = [Decimal(2), Decimal(1), Decimal("0.5")]
    e = [x.exp() for x in row]
    ref = [float(v / sum(e)) for v in e]
    out = dc.softmax_rows(t64([[2.0, 1.0, 0.5]])).data[0]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-15)


def test_softmax_rows_rejects_non_matrix():
    with pytest.raises(ShapeError):
        dc.softmax_rows(t64([1.0, 2.0]))


def test_softmax_rows_rejects_nan():
    with pytest.raises(NumericError):
        dc.softmax_rows(t64([[1.0, float("nan")]]))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(m):
    out = dc.softmax_rows(t64(m, grad=False)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_large_inputs_are_stable():
    out = dc.softmax_rows(t64([[1000.0, 1000.0]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5]])


# --- backward ---------------------------------------------------------------


def test_square_gradient():
    x = t64(3.0)
    dc.backward(dc.mul(x, x))
    assert x.grad == pytest.approx(6.0)


def test_sum_of_softmax_has_zero_gradient():
    rng = np.random.default_rng(0)
    x = t64(rand(rng, 3, 4))
    dc.backward(dc.sum_(dc.softmax_rows(x)))
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = t64([1.0, 2.0])
    with pytest.raises(ContractError):
        dc.backward(dc.mul(x, x))


def test_constant_inputs_get_no_gradient():
    x = t64([1.0, 2.0])
    c = t64([3.0, 4.0], grad=False)
    dc.backward(dc.sum_(dc.mul(x, c)))
    assert c.grad is None
    np.testing.assert_allclose(x.grad, [3.0, 4.0])


def test_no_grad_records_nothing():
    x = t64([1.0])
    with dc.no_grad():
        y = dc.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_leaf_gradients_accumulate_and_tape_is_consumed():
    x = t64(2.0)
    y = dc.mul(x, x)
    dc.backward(y)
    assert y._parents == ()
    dc.backward(dc.mul(x, x))
    assert x.grad == pytest.approx(8.0)


def test_retain_graph_allows_second_pass():
    x = t64(2.0)
    y = dc.mul(x, x)
    dc.backward(y, retain_graph=True)
    dc.backward(y)
    assert x.grad == pytest.approx(8.0)


def test_tape_visits_each_node_once_in_topological_order():
    x = t64(1.5)
    a = dc.mul(x, x)
    b = dc.add(a, x)
    loss = dc.mul(a, b)
    tape = dc.build_tape(loss)
    ids = [id(n) for n in tape]
    assert len(ids) == len(set(ids)) == 4
    pos = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(3)
    data = rand(rng, 3, 4)
    w = rand(rng, 4, 2)

    def loss_a(x):
        return dc.sum_(dc.gelu(dc.matmul(x, t64(w, False))))

    def loss_b(x):
        return dc.sum_(dc.softmax_rows(x))

    x1, x2, x3 = t64(data), t64(data), t64(data)
    dc.backward(loss_a(x1))
    dc.backward(loss_b(x2))
    dc.backward(dc.add(loss_a(x3), loss_b(x3)))
    np.testing.assert_allclose(x3.grad, x1.grad + x2.grad, atol=1e-10)


def test_three_layer_composition_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = t64(rand(rng, 3, 5))
    w1, w2 = t64(rand(rng, 5, 6)), t64(rand(rng, 6, 4))
    g, b = t64(rand(rng, 6)), t64(rand(rng, 6))

    def f():
        h = dc.gelu(dc.layer_norm(dc.matmul(x, w1), g, b))
        return dc.cross_entropy(dc.matmul(h, w2), [0, 3, 1])

    assert dc.grad_check(f, [x, w1, w2, g, b], eps=1e-4, max_coords=None) < 1e-6


# --- per-primitive gradient checks -----------------------------------------


def _check(f, params):
    return dc.grad_check(f, params, eps=1e-5, max_coords=None)


@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = t64(rand(rng, 3, 4)), t64(rand(rng, 4))
    m = t64(rand(rng, 4, 2))
    probe = rand(rng, 3, 4)

    def weighted(t, p):
        return dc.sum_(dc.mul(t, t64(p, False)))

    assert _check(lambda: weighted(dc.add(a, b), probe), [a, b]) < 1e-4
    assert _check(lambda: weighted(dc.mul(a, b), probe), [a, b]) < 1e-4
    assert _check(lambda: weighted(dc.matmul(a, m), rand(np.random.default_rng(9), 3, 2)), [a, m]) < 1e-4
    assert _check(lambda: weighted(dc.softmax_rows(a), probe), [a]) < 1e-4
    assert _check(lambda: weighted(dc.gelu(a), probe), [a]) < 1e-4
    g, be = t64(rand(rng, 4)), t64(rand(rng, 4))
    assert _check(lambda: weighted(dc.layer_norm(a, g, be), probe), [a, g, be]) < 1e-4
    ids = np.array([[0, 2], [2, 1]])
    assert _check(lambda: weighted(dc.embedding(a, ids), rand(np.random.default_rng(8), 2, 2, 4)), [a]) < 1e-4
    c = t64(rand(rng, 2, 4))
    assert _check(lambda: weighted(dc.concat([c, a], axis=0), rand(np.random.default_rng(7), 5, 4)), [a, c]) < 1e-4
    assert _check(lambda: weighted(dc.slice_(a, (slice(1, 3), slice(None))), probe[1:3]), [a]) < 1e-4
    assert _check(lambda: dc.cross_entropy(a, [1, 0, 3], [0.5, 1.0, 2.0]), [a]) < 1e-4
    assert _check(lambda: weighted(dc.replace_rows(a, [2, 0], c), probe), [a, c]) < 1e-4
    assert _check(lambda: weighted(dc.transpose(a), probe.T), [a]) < 1e-4


def test_grad_check_quadratic_form():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(4, 4))
    q = q @ q.T
    x = t64(rng.normal(size=(1, 4)))
    f = lambda: dc.sum_(dc.mul(dc.matmul(x, t64(q, False)), x))  # noqa: E731
    assert dc.grad_check(f, [x], eps=1e-4) < 1e-6


def test_grad_check_constant_function_is_zero():
    x = t64([1.0, 2.0])
    assert dc.grad_check(lambda: t64(5.0, False), [x]) == 0.0


def test_grad_check_detects_nondeterminism():
    rng = np.random.default_rng(0)
    x = t64([1.0])
    with pytest.raises(ContractError):
        dc.grad_check(lambda: dc.mul(x, t64(rng.normal(), False)), [x])


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ContractError):
        dc.grad_check(lambda: t64(1.0, False), [], eps=0.0)


# --- numerics ---------------------------------------------------------------


def test_gelu_constants():
    assert dc.GELU_C == pytest.approx(math.sqrt(2 / math.pi))
    x = np.array([-1.0, 0.0, 2.0])
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(dc.gelu(t64(x, False)).data, ref, rtol=1e-14)


def test_cross_entropy_uniform():
    out = dc.cross_entropy(t64(np.zeros((1, 2)), False), [1])
    assert float(out.data) == pytest.approx(math.log(2))


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3), np.float32), requires_grad=True)
    y = dc.layer_norm(x, Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)))
    assert y.dtype == np.float32


@settings(max_examples=25)
@given(st.tuples(st.integers(1, 3), st.integers(1, 4)), st.booleans())
def test_broadcast_add_gradient_shape(shape, row):
    b_shape = (shape[1],) if row else (shape[0], 1)
    a = t64(np.ones(shape))
    b = t64(np.ones(b_shape))
    dc.backward(dc.sum_(dc.add(a, b)))
    assert b.grad.shape == b_shape
    assert b.grad.sum() == pytest.approx(shape[0] * shape[1])
