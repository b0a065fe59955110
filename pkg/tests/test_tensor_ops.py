"""Forward semantics of the tensor op set against independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slidelab.engine.autodiff import Graph, ops
from slidelab.engine.rng import Rng
from slidelab.errors import ShapeError


def _triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    with Graph(dtype=np.float64) as g:
        out = ops.matmul(g.constant(a), g.constant(np.eye(2)))
        np.testing.assert_array_equal(out.data, a)


def test_matmul_zero_annihilator():
    with Graph(dtype=np.float64) as g:
        out = ops.matmul(g.constant(np.zeros((3, 4))), g.constant(np.ones((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_matmul_small_exact():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    with Graph(dtype=np.float64) as g:
        out = ops.matmul(g.constant(a), g.constant(b))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_against_triple_loop():
    rng = Rng(101)
    a = rng.normal_array(15).reshape(3, 5)
    b = rng.normal_array(20).reshape(5, 4)
    with Graph(dtype=np.float64) as g:
        out = ops.matmul(g.constant(a), g.constant(b))
        np.testing.assert_allclose(out.data, _triple_loop_matmul(a, b), rtol=1e-13)


def test_matmul_shape_mismatch_names_both_shapes():
    with Graph(dtype=np.float64) as g:
        with pytest.raises(ShapeError) as err:
            ops.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_softmax_symmetry():
    with Graph(dtype=np.float64) as g:
        out = ops.softmax(g.constant(np.zeros((1, 3))))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_reference_values():
    with Graph(dtype=np.float64) as g:
        out = ops.softmax(g.constant(np.array([[1.0, 2.0, 3.0]])))
        np.testing.assert_allclose(out.data, [[0.09003057, 0.24472847, 0.66524096]], atol=1e-7)


def test_softmax_rows_sum_to_one():
    x = Rng(7).normal_array(40).reshape(8, 5) * 10
    with Graph(dtype=np.float64) as g:
        out = ops.softmax(g.constant(x))
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(8), atol=1e-12)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_softmax_shift_invariance():
    x = Rng(8).normal_array(12).reshape(3, 4)
    with Graph(dtype=np.float64) as g:
        a = ops.softmax(g.constant(x))
        b = ops.softmax(g.constant(x + 1000.0))
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = Rng(9).normal_array(12).reshape(3, 4)
    with Graph(dtype=np.float64) as g:
        ls = ops.log_softmax(g.constant(x))
        s = ops.softmax(g.constant(x))
        np.testing.assert_allclose(ls.data, np.log(s.data), atol=1e-12)


def test_layer_norm_constant_vector_zeros():
    # constant input has zero variance; epsilon keeps the output finite at 0
    with Graph(dtype=np.float64) as g:
        out = ops.layer_norm(
            g.constant(np.full((2, 5), 3.7)),
            g.constant(np.ones(5)),
            g.constant(np.zeros(5)),
        )
        np.testing.assert_allclose(out.data, np.zeros((2, 5)), atol=1e-12)


def test_layer_norm_standardizes():
    x = Rng(3).normal_array(30).reshape(5, 6) * 4 + 2
    with Graph(dtype=np.float64) as g:
        out = ops.layer_norm(g.constant(x), g.constant(np.ones(6)), g.constant(np.zeros(6)))
        np.testing.assert_allclose(out.data.mean(axis=-1), np.zeros(5), atol=1e-12)
        np.testing.assert_allclose(out.data.std(axis=-1), np.ones(5), atol=1e-3)


def test_layer_norm_affine_pair():
    x = Rng(4).normal_array(8).reshape(2, 4)
    gamma = np.array([1.0, 2.0, 3.0, 4.0])
    beta = np.array([0.5, 0.0, -0.5, 1.0])
    with Graph(dtype=np.float64) as g:
        plain = ops.layer_norm(g.constant(x), g.constant(np.ones(4)), g.constant(np.zeros(4)))
        affine = ops.layer_norm(g.constant(x), g.constant(gamma), g.constant(beta))
        np.testing.assert_allclose(affine.data, plain.data * gamma + beta, atol=1e-12)


def test_gelu_reference_points():
    # tanh approximation: value at 0 is 0, large positive ~ identity
    with Graph(dtype=np.float64) as g:
        out = ops.gelu(g.constant(np.array([0.0, 10.0, -10.0])))
        assert out.data[0] == 0.0
        np.testing.assert_allclose(out.data[1], 10.0, atol=1e-6)
        np.testing.assert_allclose(out.data[2], 0.0, atol=1e-6)


def test_elementwise_values():
    x = np.array([-1.0, 0.0, 2.0])
    with Graph(dtype=np.float64) as g:
        t = g.constant(x)
        np.testing.assert_allclose(ops.tanh(t).data, np.tanh(x))
        np.testing.assert_allclose(ops.sigmoid(t).data, 1 / (1 + np.exp(-x)))
        np.testing.assert_allclose(ops.exp(t).data, np.exp(x))
        np.testing.assert_allclose(ops.neg(t).data, -x)


def test_add_mul_broadcast():
    a = np.arange(6.0).reshape(2, 3)
    b = np.array([[10.0], [20.0]])
    with Graph(dtype=np.float64) as g:
        s = ops.add(g.constant(a), g.constant(b))
        np.testing.assert_array_equal(s.data, a + b)
        p = ops.mul(g.constant(a), g.constant(b))
        np.testing.assert_array_equal(p.data, a * b)


def test_div_and_scalars():
    a = np.array([2.0, 4.0, 8.0])
    b = np.array([2.0, 2.0, 2.0])
    with Graph(dtype=np.float64) as g:
        np.testing.assert_array_equal(ops.div(g.constant(a), g.constant(b)).data, a / b)
        np.testing.assert_array_equal(ops.add_const(g.constant(a), 1.0).data, a + 1)
        np.testing.assert_array_equal(ops.mul_const(g.constant(a), 0.5).data, a * 0.5)
        np.testing.assert_array_equal(ops.pow_const(g.constant(a), 2.0).data, a**2)


def test_reductions():
    x = np.arange(12.0).reshape(3, 4)
    with Graph(dtype=np.float64) as g:
        t = g.constant(x)
        assert ops.sum(t).data == x.sum()
        np.testing.assert_array_equal(ops.sum(t, axis=0).data, x.sum(axis=0))
        np.testing.assert_array_equal(ops.mean(t, axis=1, keepdims=True).data, x.mean(axis=1, keepdims=True))


def test_shape_ops():
    x = np.arange(24.0).reshape(2, 3, 4)
    with Graph(dtype=np.float64) as g:
        t = g.constant(x)
        np.testing.assert_array_equal(ops.transpose(t, (1, 0, 2)).data, x.transpose(1, 0, 2))
        np.testing.assert_array_equal(ops.reshape(t, (6, 4)).data, x.reshape(6, 4))
        np.testing.assert_array_equal(
            ops.broadcast_to(g.constant(np.ones((1, 4))), (3, 4)).data, np.ones((3, 4))
        )


def test_concat_slice_take_rows():
    a = np.arange(6.0).reshape(2, 3)
    b = np.arange(6.0, 15.0).reshape(3, 3)
    with Graph(dtype=np.float64) as g:
        cat = ops.concat([g.constant(a), g.constant(b)], axis=0)
        np.testing.assert_array_equal(cat.data, np.concatenate([a, b], axis=0))
        np.testing.assert_array_equal(ops.slice(cat, (slice(1, 3),)).data, cat.data[1:3])
        np.testing.assert_array_equal(
            ops.take_rows(cat, np.array([4, 0, 0])).data, cat.data[[4, 0, 0]]
        )


def test_take_rows_rejects_2d_index():
    with Graph(dtype=np.float64) as g:
        with pytest.raises(ShapeError):
            ops.take_rows(g.constant(np.ones((4, 2))), np.zeros((2, 2), dtype=np.int64))


def test_detach_passes_values():
    x = np.array([1.0, 2.0])
    with Graph(dtype=np.float64) as g:
        t = g.param(x)
        d = ops.detach(t)
        np.testing.assert_array_equal(d.data, x)
        assert not d.requires_grad


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=0, max_value=2**31),
)
def test_matmul_property_vs_numpy(m, k, n, seed):
    rng = Rng(seed)
    a = rng.normal_array(m * k).reshape(m, k)
    b = rng.normal_array(k * n).reshape(k, n)
    with Graph(dtype=np.float64) as g:
        out = ops.matmul(g.constant(a), g.constant(b))
        np.testing.assert_allclose(out.data, a @ b, rtol=1e-10, atol=1e-12)
