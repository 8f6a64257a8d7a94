"""Tensor engine: forward values against hand computations, every backward
rule against the central finite-difference oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sonomae import tensor as T
from sonomae.rng import Rng
from sonomae.tensor import Tensor


def rand(shape, seed=0, dtype=np.float64):
    return Rng(seed).normal(0, 1, shape).astype(dtype)


class TestForwardValues:
    def test_softmax_of_zeros_is_uniform(self):
        out = T.softmax(Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-7)

    def test_layer_norm_of_1_2_3(self):
        # mean 2, population var 2/3 => standardized (-sqrt(3/2), 0, +sqrt(3/2))
        out = T.layer_norm(Tensor(np.array([1.0, 2.0, 3.0])), eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.2247449, 0.0, 1.2247449], atol=1e-5)

    def test_matmul_small_hand_product(self):
        a = Tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        b = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        np.testing.assert_array_equal(T.matmul(a, b).data, [[4.0, 5.0], [10.0, 11.0]])

    def test_gelu_known_points(self):
        # gelu(0) = 0; gelu(x) -> x for large x; gelu(-x) small
        out = T.gelu(Tensor(np.array([0.0, 10.0, -10.0])))
        np.testing.assert_allclose(out.data, [0.0, 10.0, 0.0], atol=1e-6)

    def test_softmax_rows_sum_to_one_and_positive(self):
        x = Tensor(rand((5, 7), seed=1))
        out = T.softmax(x, axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-6)
        assert (out.data > 0).all()

    def test_layer_norm_standardizes(self):
        x = Tensor(rand((4, 16), seed=2))
        out = T.layer_norm(x, axis=-1, eps=1e-8)
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.data.var(axis=-1) - 1.0).max() < 1e-4

    def test_dropout_identity_paths(self):
        x = Tensor(rand((3, 3)))
        assert T.dropout(x, 0.0, None, train=True) is x
        assert T.dropout(x, 0.5, Rng(0), train=False) is x

    def test_dropout_scales_kept_values(self):
        x = Tensor(np.ones((1000,)), requires_grad=True)
        out = T.dropout(x, 0.5, Rng(0), train=True)
        kept = out.data != 0
        np.testing.assert_allclose(out.data[kept], 2.0)
        assert 0.4 < kept.mean() < 0.6


class TestBackwardExact:
    def test_linear_loss_gradient_is_input(self):
        w = Tensor(rand((3, 2), seed=3), requires_grad=True)
        x = Tensor(rand((4, 3), seed=4))
        loss = T.tsum(T.matmul(x, w))
        T.backward(loss)
        # d sum(xW) / dW = sum over batch of x rows, broadcast across columns
        expected = np.repeat(x.data.sum(axis=0)[:, None], 2, axis=1)
        np.testing.assert_allclose(w.grad, expected, atol=1e-12)

    def test_unused_parameters_get_zero_gradients(self):
        used = Tensor(rand((2, 2)), requires_grad=True)
        unused = Tensor(rand((3,)), requires_grad=True)
        loss = T.tsum(T.mul(used, used))
        grads = T.backward(loss, {"used": used, "unused": unused})
        np.testing.assert_array_equal(grads["unused"], np.zeros(3))
        np.testing.assert_allclose(grads["used"], 2 * used.data)

    def test_nonscalar_loss_rejected(self):
        x = Tensor(rand((2, 2)), requires_grad=True)
        with pytest.raises(T.NonScalarLoss):
            T.backward(T.mul(x, x))

    def test_shape_mismatch_loud(self):
        with pytest.raises(T.ShapeMismatch):
            T.matmul(Tensor(rand((2, 3))), Tensor(rand((2, 3))))
        with pytest.raises(T.ShapeMismatch):
            T.add(Tensor(rand((2, 3))), Tensor(rand((4,))))

    def test_checked_mode_traps_nonfinite(self):
        with np.errstate(divide="ignore"):
            with T.checked_mode():
                with pytest.raises(T.NonFiniteValue):
                    T.log(Tensor(np.array([0.0])))
            T.log(Tensor(np.array([0.0])))  # unchecked: allowed to produce -inf

    def test_tape_is_topological_and_unique(self):
        x = Tensor(rand((3,)), requires_grad=True)
        y = T.mul(x, x)
        z = T.add(y, y)  # diamond: y feeds z twice
        loss = T.tsum(z)
        tape = T.trace(loss)
        ids = [t._id for t in tape.nodes]
        assert ids == sorted(ids) and len(ids) == len(set(ids))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, 4 * x.data, atol=1e-12)


GRAD_OPS = {
    "add": lambda x: T.tsum(T.add(x, T.mul(x, x))),
    "sub": lambda x: T.tsum(T.sub(T.mul(x, x), x)),
    "mul": lambda x: T.tsum(T.mul(x, T.mul(x, x))),
    "exp": lambda x: T.tsum(T.exp(x)),
    "log": lambda x: T.tsum(T.log(T.add(T.mul(x, x), Tensor(np.array(1.0))))),
    "gelu": lambda x: T.tsum(T.gelu(x)),
    "softmax": lambda x: T.tsum(T.mul(T.softmax(x, axis=-1), Tensor(rand(x.shape, seed=9)))),
    "layer_norm": lambda x: T.tsum(T.mul(T.layer_norm(x, axis=-1, eps=1e-6), Tensor(rand(x.shape, seed=10)))),
    "mean": lambda x: T.tmean(T.mul(x, x)),
    "sum_axis": lambda x: T.tsum(T.mul(T.tsum(x, axis=0), T.tsum(x, axis=0))),
    "transpose": lambda x: T.tsum(T.mul(T.transpose(x), T.transpose(x))),
    "reshape": lambda x: T.tsum(T.mul(T.reshape(x, (-1,)), T.reshape(x, (-1,)))),
}


class TestGradCheckOracle:
    @pytest.mark.parametrize("name", sorted(GRAD_OPS))
    def test_op_gradient_matches_finite_differences(self, name):
        report = T.grad_check(GRAD_OPS[name], rand((3, 4), seed=11), eps=1e-4, tol=1e-4)
        assert report.passed, f"{name}: {report}"

    def test_matmul_gradients(self):
        b = Tensor(rand((4, 3), seed=12))

        def f(x):
            return T.tsum(T.mul(T.matmul(x, b), T.matmul(x, b)))

        assert T.grad_check(f, rand((2, 4), seed=13), eps=1e-4, tol=1e-4).passed

    def test_batched_matmul_gradients(self):
        b = Tensor(rand((2, 3, 5), seed=14))

        def f(x):
            return T.tsum(T.matmul(x, b))

        assert T.grad_check(f, rand((2, 4, 3), seed=15), eps=1e-4, tol=1e-4).passed

    def test_gather_scatter_concat_gradients(self):
        idx = np.array([[0, 2], [1, 3]])

        def f_gather(x):
            return T.tsum(T.mul(T.gather_batched(x, idx), T.gather_batched(x, idx)))

        assert T.grad_check(f_gather, rand((2, 4, 3), seed=16), eps=1e-4, tol=1e-4).passed

        values = Tensor(rand((2, 2, 3), seed=17))

        def f_scatter(x):
            out = T.scatter_batched(x, idx, values)
            return T.tsum(T.mul(out, out))

        assert T.grad_check(f_scatter, rand((2, 4, 3), seed=18), eps=1e-4, tol=1e-4).passed

        def f_concat(x):
            out = T.concat([x, T.mul(x, x)], axis=1)
            return T.tsum(T.mul(out, out))

        assert T.grad_check(f_concat, rand((2, 3), seed=19), eps=1e-4, tol=1e-4).passed

    def test_shared_gather_gradients(self):
        def f(x):
            picked = T.gather(x, [2, 0, 2], axis=0)  # repeated index accumulates
            return T.tsum(T.mul(picked, picked))

        assert T.grad_check(f, rand((4, 3), seed=20), eps=1e-4, tol=1e-4).passed

    def test_quadratic_is_exact(self):
        report = T.grad_check(lambda x: T.tsum(T.mul(x, x)) * 0.5, rand((6,), seed=21), eps=1e-5, tol=1e-4)
        assert report.max_rel_err < 1e-9  # linear gradient: FD is exact up to rounding

    def test_softmax_cross_entropy_composite(self):
        labels = np.array([1, 0, 2])
        onehot = np.eye(3)[labels]

        def f(x):
            p = T.softmax(x, axis=-1)
            return T.tsum(T.mul(T.log(p), Tensor(-onehot))) * (1.0 / 3.0)

        assert T.grad_check(f, rand((3, 3), seed=22), eps=1e-4, tol=1e-4).passed

    def test_negative_control_wrong_backward_fails(self):
        def broken_square(x):
            # forward of x^2 with an off-by-factor-2 backward stub
            def bw(g):
                T._accum(x, g * x.data)  # should be 2 * x

            return T._result(x.data * x.data, (x,), bw, "broken_square")

        report = T.grad_check(lambda x: T.tsum(broken_square(x)), rand((5,), seed=23))
        assert not report.passed


@settings(max_examples=20, deadline=None)
@given(
    shape=st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple),
    seed=st.integers(0, 2**20),
)
def test_gradcheck_random_shapes_lognormish(shape, seed):
    """Composite op chain passes the finite-difference oracle on random
    shapes up to rank 4."""

    def f(x):
        y = T.gelu(T.mul(x, x))
        y = T.add(y, x)
        return T.tmean(T.mul(y, y))

    assert T.grad_check(f, rand(shape, seed=seed), eps=1e-4, tol=1e-4).passed


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**20), rows=st.integers(1, 5), cols=st.integers(2, 6))
def test_softmax_distribution_properties(seed, rows, cols):
    out = T.softmax(Tensor(rand((rows, cols), seed=seed) * 3), axis=-1).data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert (out > 0).all()


def test_forward_determinism_same_seed():
    def run():
        x = Tensor(Rng(42).normal(0, 1, (8, 8)).astype(np.float32), requires_grad=True)
        y = T.tsum(T.softmax(T.matmul(x, T.transpose(x)), axis=-1))
        T.backward(y)
        return y.data.copy(), x.grad.copy()

    (y1, g1), (y2, g2) = run(), run()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)
