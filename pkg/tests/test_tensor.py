import numpy as np
import pytest

from dflens import tensor as T
from support import check_gradient, finite_difference, loop_global_average_pool, relative_error


class TestElementwise:
    def test_relu_definition(self):
        out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_additive_identity_bit_exact(self):
        x = np.random.default_rng(0).standard_normal((4, 5))
        out = T.add(T.Tensor(x), 0.0)
        assert np.array_equal(out.data, x)

    def test_elementwise_product(self):
        out = T.mul(T.Tensor([1.0, 2.0, 3.0]), T.Tensor([4.0, 5.0, 6.0]))
        assert np.array_equal(out.data, [4.0, 10.0, 18.0])

    def test_sub_and_scale(self):
        x = T.Tensor([3.0, 1.0])
        assert np.array_equal(T.sub(x, T.Tensor([1.0, 1.0])).data, [2.0, 0.0])
        assert np.array_equal(T.scale(x, -2.0).data, [-6.0, -2.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))))

    def test_scalar_operand_broadcasts(self):
        out = T.mul(T.Tensor(np.ones((2, 2))), 3.0)
        assert np.array_equal(out.data, np.full((2, 2), 3.0))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 5, 5))
        k = np.zeros((2, 2, 1, 1))
        k[0, 0, 0, 0] = 1.0
        k[1, 1, 0, 0] = 1.0
        out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=1, padding=0)
        assert np.array_equal(out.data, x)

    def test_zero_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 4, 4))
        out = T.conv2d(T.Tensor(x), T.Tensor(np.zeros((3, 1, 3, 3))), stride=1, padding=1)
        assert np.array_equal(out.data, np.zeros((3, 4, 4)))

    def test_non_integral_extent_errors(self):
        with pytest.raises(T.ShapeError, match="non-integral"):
            T.conv2d(T.Tensor(np.zeros((1, 6, 6))), T.Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=0)

    def test_even_kernel_errors(self):
        with pytest.raises(T.ShapeError, match="odd"):
            T.conv2d(T.Tensor(np.zeros((1, 4, 4))), T.Tensor(np.zeros((1, 1, 2, 2))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 3, 3))
        k = rng.standard_normal((2, 1, 3, 3))
        err = check_gradient(
            lambda x, k: T.tsum(T.conv2d(x, k, stride=1, padding=1)), {"x": x, "k": k}
        )
        assert err < 1e-6

    def test_strided_gradient(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        err = check_gradient(
            lambda x, k: T.tsum(T.conv2d(x, k, stride=2, padding=0)), {"x": x, "k": k}
        )
        assert err < 1e-5


class TestBackward:
    def test_quadratic_gradient(self):
        x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True)
        T.backward(T.tsum(x * x))
        assert np.allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_relu_dead_zone(self):
        x = T.Tensor([-1.0, -2.0, -0.5], requires_grad=True)
        T.backward(T.tsum(T.relu(x)))
        assert np.array_equal(x.grad, np.zeros(3))

    def test_composite_network_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 4, 4))
        k = rng.standard_normal((2, 2, 3, 3))
        err = check_gradient(
            lambda x, k: T.tsum(T.relu(T.conv2d(x, k, stride=1, padding=1))),
            {"x": x, "k": k},
        )
        assert err < 1e-5

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(x * x)

    def test_graph_consumed_after_backward(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        loss = T.tsum(x * x)
        T.backward(loss)
        with pytest.raises(T.GraphError, match="consumed"):
            T.backward(loss)

    def test_returns_gradient_map(self):
        x = T.Tensor([2.0], requires_grad=True)
        y = T.Tensor([3.0], requires_grad=True)
        grads = T.backward(T.tsum(x * y))
        assert np.array_equal(grads[x], [3.0]) and np.array_equal(grads[y], [2.0])

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(6)
        base = rng.standard_normal(6)
        a, b = 2.5, -1.25

        def grad_of(scale_f, scale_g):
            x = T.Tensor(base, requires_grad=True)
            f = T.tsum(x * x)
            g = T.tsum(T.relu(x))
            T.backward(T.scale(f, scale_f) + T.scale(g, scale_g))
            return x.grad

        combined = grad_of(a, b)
        expected = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
        assert np.allclose(combined, expected, atol=1e-12)


class TestGlobalAveragePool:
    def test_constant_map(self):
        out = T.global_average_pool(T.Tensor(np.full((3, 4, 4), 2.5)))
        assert np.array_equal(out.data, [2.5, 2.5, 2.5])

    def test_mean_of_small_grid(self):
        out = T.global_average_pool(T.Tensor([[[1.0, 3.0], [5.0, 7.0]]]))
        assert np.array_equal(out.data, [4.0])

    def test_matches_loop_oracle(self):
        a = np.random.default_rng(7).standard_normal((4, 5, 6))
        out = T.global_average_pool(T.Tensor(a))
        assert np.allclose(out.data, loop_global_average_pool(a), atol=1e-12)

    def test_rank_check(self):
        with pytest.raises(T.ShapeError):
            T.global_average_pool(T.Tensor(np.zeros((2, 2))))


class TestOtherOps:
    def test_matmul_gradient(self):
        rng = np.random.default_rng(8)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        err = check_gradient(lambda a, b: T.tsum(T.matmul(a, b)), {"a": a, "b": b})
        assert err < 1e-6

    def test_softmax_rows_sum_to_one(self):
        s = T.softmax(T.Tensor(np.random.default_rng(9).standard_normal((5, 7))), axis=1)
        assert np.allclose(s.data.sum(axis=1), 1.0, atol=1e-12)

    def test_softmax_gradient(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))
        err = check_gradient(
            lambda x: T.tsum(T.mul(T.softmax(x, axis=1), w)), {"x": x}
        )
        assert err < 1e-5

    def test_upsample_then_downsample_roundtrip(self):
        x = np.random.default_rng(11).standard_normal((2, 3, 3))
        up = T.upsample_nearest(T.Tensor(x), 2)
        assert up.shape == (2, 6, 6)
        down = T.downsample_nearest(up, 2)
        assert np.array_equal(down.data, x)

    def test_updown_gradients(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((1, 4, 4))
        w = rng.standard_normal((1, 8, 8))
        err = check_gradient(lambda x: T.tsum(T.mul(T.upsample_nearest(x, 2), w)), {"x": x})
        assert err < 1e-6
        w2 = rng.standard_normal((1, 2, 2))
        err = check_gradient(lambda x: T.tsum(T.mul(T.downsample_nearest(x, 2), w2)), {"x": x})
        assert err < 1e-6

    def test_concat_gradient(self):
        rng = np.random.default_rng(13)
        a, b = rng.standard_normal((2, 3, 3)), rng.standard_normal((1, 3, 3))
        w = rng.standard_normal((3, 3, 3))
        err = check_gradient(
            lambda a, b: T.tsum(T.mul(T.concat([a, b], axis=0), w)), {"a": a, "b": b}
        )
        assert err < 1e-6

    def test_take_rows_gradient_accumulates_repeats(self):
        table = T.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = T.take_rows(table, [1, 1, 3])
        T.backward(T.tsum(out))
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        assert np.array_equal(table.grad, expected)

    def test_mean_and_reshape(self):
        x = T.Tensor(np.arange(6.0), requires_grad=True)
        loss = T.tmean(T.reshape(x, (2, 3)) * T.reshape(x, (2, 3)))
        T.backward(loss)
        assert np.allclose(x.grad, 2 * x.data / 6, atol=1e-15)


class TestDeterminismAndFiniteness:
    def test_identical_inputs_bitwise_identical(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 8, 8))
        k = rng.standard_normal((4, 2, 3, 3))

        def run():
            out = T.relu(T.conv2d(T.Tensor(x), T.Tensor(k), 1, 1))
            return T.softmax(T.reshape(out, (4, 64)), axis=1).data

        assert np.array_equal(run(), run())

    def test_finite_outputs_for_finite_inputs(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((3, 6, 6)) * 100
        out = T.softmax(T.reshape(T.Tensor(x), (3, 36)), axis=1)
        assert np.all(np.isfinite(out.data))

    def test_no_grad_blocks_recording(self):
        with T.no_grad():
            x = T.Tensor(np.ones(3), requires_grad=True)
            y = x * x
        assert not x.requires_grad and not y.requires_grad


def test_every_op_finite_difference_sweep():
    """One randomized FD check per differentiable op at step 1e-4."""
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 4, 4))
    k = rng.standard_normal((2, 2, 3, 3))
    w = rng.standard_normal((2, 4, 4))
    cases = {
        "add": lambda x: T.tsum(T.mul(T.add(x, 1.5), w)),
        "sub": lambda x: T.tsum(T.mul(T.sub(x, 0.5), w)),
        "mul": lambda x: T.tsum(T.mul(T.mul(x, x), w)),
        "scale": lambda x: T.tsum(T.mul(T.scale(x, -3.0), w)),
        "relu": lambda x: T.tsum(T.mul(T.relu(x), w)),
        "conv2d": lambda x: T.tsum(T.conv2d(x, T.Tensor(k), 1, 1)),
        "gap": lambda x: T.tsum(T.global_average_pool(x)),
        "sum": lambda x: T.tsum(x),
        "mean": lambda x: T.tmean(T.mul(x, w)),
        "reshape": lambda x: T.tsum(T.mul(T.reshape(x, (4, 8)), T.Tensor(w.reshape(4, 8)))),
        "transpose": lambda x: T.tsum(T.mul(T.transpose(x, (2, 0, 1)), T.Tensor(w.transpose(2, 0, 1)))),
        "upsample": lambda x: T.tsum(T.mul(T.upsample_nearest(x, 2), T.Tensor(np.tile(w, (1, 2, 2))))),
        "downsample": lambda x: T.tsum(T.downsample_nearest(x, 2)),
    }
    for name, build in cases.items():
        err = check_gradient(build, {"x": x.copy()})
        assert err < 1e-5, f"{name} gradient off by {err}"
