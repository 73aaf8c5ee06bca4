"""Autodiff engine: op semantics, gradients vs finite differences, graph behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avss import tensor as T
from avss.errors import GraphError, ShapeMismatch
from avss.gradcheck import check_gradients, rand_tensor
from avss.tensor import Tensor


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_hand_computed(self):
        a = Tensor([[1.0, 2.0]])
        b = Tensor([[3.0], [4.0]])
        assert T.matmul(a, b).data.item() == pytest.approx(11.0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_matches_finite_differences(self, rng):
        a = rand_tensor(rng, (5, 4))
        b = rand_tensor(rng, (4, 3))
        err = check_gradients(lambda: T.matmul(a, b).sum(), [a, b], tol=1e-6)
        assert err < 1e-6

    def test_batched_grad(self, rng):
        a = rand_tensor(rng, (2, 3, 4))
        b = rand_tensor(rng, (4, 5))
        check_gradients(lambda: (T.matmul(a, b) * T.matmul(a, b)).sum(), [a, b])


class TestConv:
    def test_1d_identity_kernel(self):
        x = Tensor([[1.0, 2.0, 3.0]])
        k = Tensor([[[1.0]]])
        out = T.conv_nd(x, k)
        assert np.array_equal(out.data, [[1.0, 2.0, 3.0]])

    def test_2d_ones(self):
        x = Tensor(np.ones((1, 3, 3)))
        k = Tensor(np.ones((1, 1, 2, 2)))
        out = T.conv_nd(x, k)
        assert out.shape == (1, 2, 2)
        assert np.array_equal(out.data, np.full((1, 2, 2), 4.0))

    def test_output_extent_formula(self, rng):
        x = rand_tensor(rng, (1, 2, 9, 11), requires_grad=False)
        k = rand_tensor(rng, (3, 2, 3, 3), requires_grad=False)
        out = T.conv_nd(x, k, stride=2, padding=1)
        assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (11 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self, rng):
        x = rand_tensor(rng, (3, 5, 5), requires_grad=False)
        k = rand_tensor(rng, (2, 4, 3, 3), requires_grad=False)
        with pytest.raises(ShapeMismatch, match="channel"):
            T.conv_nd(x, k)

    def test_kernel_too_large(self, rng):
        x = rand_tensor(rng, (1, 2, 2), requires_grad=False)
        k = rand_tensor(rng, (1, 1, 5, 5), requires_grad=False)
        with pytest.raises(ShapeMismatch, match="larger"):
            T.conv_nd(x, k)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), ((1, 2), (0, 1))])
    def test_2d_grad(self, rng, stride, padding):
        x = rand_tensor(rng, (2, 2, 6, 7))
        k = rand_tensor(rng, (3, 2, 3, 3))
        b = rand_tensor(rng, (3,))

        def loss():
            out = T.conv_nd(x, k, b, stride, padding)
            return (out * out).sum()

        check_gradients(loss, [x, k, b], tol=1e-5)

    def test_3d_grad(self, rng):
        x = rand_tensor(rng, (2, 4, 6, 6))
        k = rand_tensor(rng, (2, 2, 3, 3, 3))
        out = T.conv_nd(x, k, stride=1, padding=1)
        assert out.shape == (2, 4, 6, 6)
        err = check_gradients(
            lambda: (T.conv_nd(x, k, stride=1, padding=1)
                     * T.conv_nd(x, k, stride=1, padding=1)).sum(),
            [x, k], tol=1e-5,
        )
        assert err < 1e-5

    def test_1d_against_direct_loop(self, rng):
        x = rng.uniform(-1, 1, size=(2, 9))
        k = rng.uniform(-1, 1, size=(3, 2, 3))
        out = T.conv_nd(Tensor(x), Tensor(k), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1)))
        expect = np.zeros((3, 5))
        for co in range(3):
            for i in range(5):
                expect[co, i] = (xp[:, 2 * i : 2 * i + 3] * k[co]).sum()
        np.testing.assert_allclose(out, expect, atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_large_values_stable(self):
        out = T.softmax(Tensor([1000.0, 1000.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        out = T.softmax(x, axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(4), atol=1e-9)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_and_normalized(self, values):
        out = T.softmax(Tensor(values), axis=0)
        assert np.all(out.data >= 0)
        assert abs(out.data.sum() - 1.0) < 1e-9

    def test_grad(self, rng):
        x = rand_tensor(rng, (3, 5))
        w = Tensor(rng.normal(size=(3, 5)))
        check_gradients(lambda: (T.softmax(x, axis=1) * w).sum(), [x], tol=1e-6)


class TestActivations:
    def test_relu_values(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_subgradient_zero_at_kink(self):
        x = Tensor([0.0], requires_grad=True)
        T.relu(x).sum().backward()
        assert x.grad[0] == 0.0

    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)

    @pytest.mark.parametrize("op", [T.relu, T.leaky_relu, T.sigmoid, T.tanh])
    def test_grads_away_from_kinks(self, rng, op):
        base = rng.uniform(-2, 2, size=(4, 6))
        base[np.abs(base) < 0.05] = 0.5  # stay away from the relu kink
        x = Tensor(base, requires_grad=True)
        w = Tensor(rng.normal(size=(4, 6)))
        check_gradients(lambda: (op(x) * w).sum(), [x], tol=1e-6)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((3, 4, 2)))

    def test_product_rule(self):
        x = Tensor([3.0], requires_grad=True)
        y = Tensor([4.0], requires_grad=True)
        (x * y).sum().backward()
        assert x.grad[0] == pytest.approx(4.0)
        assert y.grad[0] == pytest.approx(3.0)

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            (x * 2.0).backward()

    def test_backward_twice_with_zeroing_is_deterministic(self, rng):
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        y = Tensor(rng.normal(size=(4, 4)), requires_grad=True)

        def run():
            x.zero_grad()
            y.zero_grad()
            loss = (T.tanh(T.matmul(x, y)) * T.sigmoid(x + y)).sum()
            loss.backward()
            return x.grad.copy(), y.grad.copy()

        gx1, gy1 = run()
        gx2, gy2 = run()
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gy1, gy2)

    def test_reused_node_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x + x * x
        y.sum().backward()
        assert x.grad[0] == pytest.approx(8.0)

    def test_all_reachable_leaves_get_grads(self, rng):
        leaves = [Tensor(rng.normal(size=(2, 2)), requires_grad=True) for _ in range(4)]
        loss = leaves[0]
        for leaf in leaves[1:]:
            loss = T.matmul(loss, leaf)
        loss.sum().backward()
        assert all(leaf.grad is not None for leaf in leaves)


class TestShapeOps:
    def test_reshape_transpose_grads(self, rng):
        x = rand_tensor(rng, (2, 3, 4))
        w = Tensor(rng.normal(size=(4, 3, 2)))
        check_gradients(
            lambda: (x.transpose((2, 1, 0)) * w).sum() + (x.reshape((6, 4)) * 0.5).sum(),
            [x],
        )

    def test_getitem_grad(self, rng):
        x = rand_tensor(rng, (4, 5))
        check_gradients(lambda: (x[1:3, ::2] * x[1:3, ::2]).sum(), [x])

    def test_concat_grad(self, rng):
        a = rand_tensor(rng, (2, 3))
        b = rand_tensor(rng, (2, 2))
        w = Tensor(rng.normal(size=(2, 5)))
        check_gradients(lambda: (T.concat([a, b], axis=1) * w).sum(), [a, b])

    def test_expand_grad(self, rng):
        x = rand_tensor(rng, (3, 1, 2))
        w = Tensor(rng.normal(size=(3, 4, 2)))
        check_gradients(lambda: (T.expand(x, (3, 4, 2)) * w).sum(), [x])

    def test_index_select_grad(self, rng):
        x = rand_tensor(rng, (3, 5))
        idx = [0, 2, 2, 4]
        w = Tensor(rng.normal(size=(3, 4)))
        check_gradients(lambda: (T.index_select(x, 1, idx) * w).sum(), [x])

    def test_upsample_nearest_values_and_grad(self, rng):
        x = Tensor([[[1.0, 2.0], [3.0, 4.0]]], requires_grad=True)
        up = T.upsample_nearest(x, (2, 2))
        assert np.array_equal(
            up.data[0],
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
        )
        xr = rand_tensor(rng, (1, 2, 3, 2))
        w = Tensor(rng.normal(size=(1, 2, 6, 4)))
        check_gradients(lambda: (T.upsample_nearest(xr, (2, 2)) * w).sum(), [xr])


class TestReductionsAndMisc:
    def test_mean_and_broadcast_grads(self, rng):
        x = rand_tensor(rng, (4, 3))
        b = rand_tensor(rng, (3,))
        check_gradients(lambda: ((x + b) * (x + b)).mean(), [x, b])

    def test_norm2_value_and_grad(self, rng):
        x = Tensor([[3.0, 4.0], [0.0, 0.0]], requires_grad=True)
        out = T.norm2(x, axis=1)
        np.testing.assert_allclose(out.data, [5.0, 0.0])
        out.sum().backward()
        np.testing.assert_allclose(x.grad[0], [0.6, 0.8])
        np.testing.assert_allclose(x.grad[1], [0.0, 0.0])  # subgradient 0 at zero
        y = rand_tensor(rng, (3, 4))
        check_gradients(lambda: T.norm2(y, axis=(1,)).sum(), [y], tol=1e-6)

    def test_div_sqrt_exp_log_grads(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
        y = Tensor(rng.uniform(0.5, 2.0, size=(3, 3)), requires_grad=True)
        check_gradients(
            lambda: (T.sqrt(x) / y + T.exp(x * 0.3) + T.log(y)).sum(), [x, y], tol=1e-6
        )

    def test_no_grad_blocks_graph(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with T.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad

    def test_dtype_switch(self):
        with T.using_dtype(np.float32):
            t = Tensor([1.0, 2.0])
            assert t.dtype == np.float32
        assert Tensor([1.0]).dtype == np.float64
