"""Reverse-mode differentiation: tape mechanics, gradients, FD harness."""

import numpy as np
import pytest

from slidelab.engine.autodiff import Graph, backward, ops
from slidelab.engine.gradcheck import finite_diff_check
from slidelab.engine.rng import Rng
from slidelab.errors import ContractError, DeterminismError


def test_sum_of_squares_gradient():
    x = np.array([1.0, 2.0, 3.0])
    with Graph(dtype=np.float64) as g:
        t = g.param(x)
        loss = ops.sum(ops.mul(t, t))
        backward(loss)
        np.testing.assert_array_equal(t.grad, [2.0, 4.0, 6.0])


def test_unreached_leaf_gets_exact_zeros():
    with Graph(dtype=np.float64) as g:
        used = g.param(np.array([2.0]))
        unused = g.param(np.ones((3, 2)))
        loss = ops.sum(ops.mul(used, used))
        backward(loss)
        assert unused.grad is not None
        assert np.all(unused.grad == 0.0)
        assert unused.grad.shape == (3, 2)


def test_grad_accumulates_across_uses():
    # y = x*x + x -> dy/dx = 2x + 1, same leaf feeding two ops
    with Graph(dtype=np.float64) as g:
        x = g.param(np.array([3.0]))
        loss = ops.sum(ops.add(ops.mul(x, x), x))
        backward(loss)
        np.testing.assert_array_equal(x.grad, [7.0])


def test_non_scalar_root_rejected():
    with Graph(dtype=np.float64) as g:
        x = g.param(np.ones(3))
        with pytest.raises(ContractError):
            backward(ops.mul(x, x))


def test_detach_blocks_gradient():
    with Graph(dtype=np.float64) as g:
        x = g.param(np.array([2.0, 5.0]))
        # d/dx sum(detach(x) * x) must equal x (the detached factor is constant)
        loss = ops.sum(ops.mul(ops.detach(x), x))
        backward(loss)
        np.testing.assert_array_equal(x.grad, x.data)


def test_broadcast_gradient_reduces():
    with Graph(dtype=np.float64) as g:
        row = g.param(np.array([[1.0, 2.0]]))
        big = ops.broadcast_to(row, (4, 2))
        backward(ops.sum(big))
        np.testing.assert_array_equal(row.grad, [[4.0, 4.0]])


def test_slice_gradient_scatters():
    with Graph(dtype=np.float64) as g:
        x = g.param(np.arange(6.0).reshape(3, 2))
        backward(ops.sum(ops.slice(x, (slice(1, 2),))))
        np.testing.assert_array_equal(x.grad, [[0, 0], [1, 1], [0, 0]])


def test_take_rows_gradient_accumulates_duplicates():
    with Graph(dtype=np.float64) as g:
        x = g.param(np.ones((3, 2)))
        picked = ops.take_rows(x, np.array([0, 0, 2]))
        backward(ops.sum(picked))
        np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_matmul_gradients_match_analytic():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.5, -1.0], [2.0, 0.25]])
    with Graph(dtype=np.float64) as g:
        ta, tb = g.param(a), g.param(b)
        backward(ops.sum(ops.matmul(ta, tb)))
        ones = np.ones((2, 2))
        np.testing.assert_allclose(ta.grad, ones @ b.T)
        np.testing.assert_allclose(tb.grad, a.T @ ones)


def test_softmax_gradient_rows_sum_zero():
    """Softmax maps onto the simplex, so its Jacobian rows kill constants."""
    x = Rng(5).normal_array(8).reshape(2, 4)
    w = Rng(6).normal_array(8).reshape(2, 4)
    with Graph(dtype=np.float64) as g:
        t = g.param(x)
        backward(ops.sum(ops.mul(ops.softmax(t), g.constant(w))))
        np.testing.assert_allclose(t.grad.sum(axis=-1), np.zeros(2), atol=1e-12)


def test_finite_diff_quadratic_is_tight():
    def build(g, ts):
        x = ts[0]
        return ops.sum(ops.mul(x, x))

    report = finite_diff_check(build, [np.array([1.5, -2.0, 0.5])])
    assert report.max_rel_err < 1e-9
    assert report.n_coords == 3


def test_finite_diff_constant_objective():
    def build(g, ts):
        return ops.sum(ops.mul_const(ops.mul(ts[0], ts[0]), 0.0))

    report = finite_diff_check(build, [np.array([1.0, 2.0])])
    assert report.max_rel_err == 0.0


def test_finite_diff_two_layer_mlp():
    rng = Rng(77)
    w1 = rng.normal_array(12).reshape(4, 3) * 0.4
    b1 = rng.normal_array(3) * 0.1
    w2 = rng.normal_array(3).reshape(3, 1) * 0.4
    x = rng.normal_array(8).reshape(2, 4)

    def build(g, ts):
        tw1, tb1, tw2 = ts
        h = ops.tanh(ops.add(ops.matmul(g.constant(x), tw1), ops.broadcast_to(ops.reshape(tb1, (1, 3)), (2, 3))))
        return ops.sum(ops.matmul(h, tw2))

    report = finite_diff_check(build, [w1, b1, w2])
    assert report.max_rel_err < 1e-6


def test_finite_diff_named_params():
    def build(g, ts):
        return ops.sum(ops.mul(ts["a"], ts["b"]))

    report = finite_diff_check(build, {"a": np.array([2.0]), "b": np.array([3.0])})
    assert report.max_rel_err < 1e-10
    assert report.worst_param in ("a", "b")


def test_finite_diff_detects_nondeterminism():
    calls = [0]

    def build(g, ts):
        calls[0] += 1
        return ops.sum(ops.mul_const(ts[0], float(calls[0])))

    with pytest.raises(DeterminismError):
        finite_diff_check(build, [np.array([1.0])])


def test_no_grad_block_records_nothing():
    with Graph(dtype=np.float64) as g:
        x = g.param(np.array([2.0]))
        with g.no_grad():
            y = ops.mul(x, x)
        assert y.creator is None
        loss = ops.sum(ops.mul(x, x))
        backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0])


def test_closed_graph_rejects_new_tensors():
    g = Graph(dtype=np.float64)
    with g:
        g.constant(np.ones(2))
    with pytest.raises(ContractError):
        g.constant(np.ones(2))


def test_independent_backwards_in_sequence():
    """Two graphs over the same parameter arrays stay isolated."""
    arr = np.array([1.0, 2.0])
    grads = []
    for scale in (1.0, 3.0):
        with Graph(dtype=np.float64) as g:
            t = g.param(arr)
            backward(ops.sum(ops.mul_const(ops.mul(t, t), scale)))
            grads.append(np.array(t.grad, copy=True))
    np.testing.assert_array_equal(grads[0] * 3.0, grads[1])
