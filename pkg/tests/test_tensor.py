import numpy as np
import pytest

import odonet.tensor as T
from odonet.errors import ContractError, DimensionError, NumericError
from odonet.tensor import ComputationTape, Tensor, backward, grad_check


def rand(shape, seed, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


class TestForwardValues:
    def test_conv_sum_of_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, k, b, stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_conv_identity_kernel(self):
        x = Tensor(rand((2, 1, 5, 7), 0))
        k = Tensor(np.ones((1, 1, 1, 1)))
        out = T.conv2d(x, k, Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_logistic_tanh_at_zero(self):
        assert T.logistic(Tensor([0.0])).item() == 0.5
        assert T.tanh(Tensor([0.0])).item() == 0.0

    def test_logistic_gradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        backward(T.reduce_sum(T.logistic(x)))
        assert x.grad[0] == pytest.approx(0.25, abs=1e-15)

    def test_matmul_identity(self):
        x = rand((4, 4), 1)
        out = T.matmul(Tensor(np.eye(4)), Tensor(x))
        np.testing.assert_allclose(out.data, x)

    def test_matmul_small(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_mean_simple(self):
        assert T.reduce_mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0

    def test_reduce_empty_axes_is_identity(self):
        x = Tensor(rand((2, 3), 2))
        out = T.reduce("sum", x, ())
        assert out is x

    def test_mean_gradient_broadcasts(self):
        x = Tensor(rand(4, 3), requires_grad=True)
        backward(T.reduce_mean(x))
        np.testing.assert_array_equal(x.grad, np.full(4, 0.25))

    def test_leaky_relu_slope(self):
        x = Tensor([-2.0, 0.0, 3.0])
        out = T.leaky_relu(x, slope=0.1)
        np.testing.assert_allclose(out.data, [-0.2, 0.0, 3.0])


class TestBackwardMechanics:
    def test_square_gradient(self):
        x = Tensor([3.0], requires_grad=True)
        backward(T.reduce_sum(T.mul(x, x)))
        assert x.grad[0] == 6.0

    def test_mean_backward_quarter(self):
        x = Tensor(np.ones(4), requires_grad=True)
        backward(T.reduce_mean(x))
        np.testing.assert_array_equal(x.grad, [0.25] * 4)

    def test_backward_requires_scalar(self):
        x = Tensor(rand((2, 2), 3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(T.mul(x, x))

    def test_repeat_backward_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with ComputationTape():
            y = T.reduce_sum(T.mul(x, x))
            backward(y)
            backward(y)
        assert x.grad[0] == 8.0

    def test_fanout_additivity_exact(self):
        xval = rand(6, 4)

        def f(t):
            return T.reduce_sum(T.mul(t, t))

        def g(t):
            return T.reduce_sum(T.tanh(t))

        xa = Tensor(xval.copy(), requires_grad=True)
        backward(f(xa))
        xb = Tensor(xval.copy(), requires_grad=True)
        backward(g(xb))
        xc = Tensor(xval.copy(), requires_grad=True)
        backward(T.add(f(xc), g(xc)))
        np.testing.assert_array_equal(xc.grad, xa.grad + xb.grad)

    def test_separate_backwards_do_not_leak_between_results(self):
        x = Tensor([2.0], requires_grad=True)
        with ComputationTape():
            y1 = T.reduce_sum(T.mul(x, x))
            backward(y1)
            y2 = T.reduce_sum(T.mul(x, Tensor([3.0])))
            backward(y2)
        # grad = d(x^2)/dx + d(3x)/dx = 4 + 3
        assert x.grad[0] == 7.0

    def test_intermediates_receive_grads(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        backward(T.reduce_sum(y))
        assert y.grad is not None
        np.testing.assert_array_equal(y.grad, [1.0, 1.0])

    def test_broadcast_reduce_roundtrip(self):
        # power-of-two extents keep pairwise summation exact
        for c in (0.1, -3.7, 2.5e-3):
            x = T.add(Tensor(np.zeros((4, 8))), Tensor([c]))
            assert T.reduce_mean(x).item() == c

    def test_determinism_bitwise(self):
        def run():
            x = Tensor(rand((5, 5), 7), requires_grad=True)
            y = T.reduce_mean(T.tanh(T.matmul(x, x)))
            backward(y)
            return y.item(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)


class TestShapeErrors:
    def test_matmul_inner_mismatch(self):
        with pytest.raises(DimensionError, match="inner"):
            T.matmul(Tensor(rand((3, 4), 0)), Tensor(rand((3, 2), 1)))

    def test_broadcast_error_names_axis(self):
        with pytest.raises(DimensionError, match="axis"):
            T.add(Tensor(rand((2, 3), 0)), Tensor(rand((2, 4), 1)))

    def test_conv_channel_mismatch(self):
        with pytest.raises(DimensionError, match="channel"):
            T.conv2d(Tensor(rand((1, 2, 5, 5), 0)), Tensor(rand((3, 3, 3, 3), 1)))

    def test_conv_too_small(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(rand((1, 1, 2, 2), 0)), Tensor(rand((1, 1, 5, 5), 1)))

    def test_reduce_rejects_negative_axis(self):
        with pytest.raises(DimensionError):
            T.reduce("sum", Tensor(rand((2, 2), 0)), (-1,))

    def test_reduce_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            T.reduce("mean", Tensor(rand((2, 2), 0)), (5,))

    def test_elementwise_dispatch(self):
        out = T.elementwise("add", Tensor([1.0]), Tensor([2.0]))
        assert out.item() == 3.0
        with pytest.raises(ContractError):
            T.elementwise("nope", Tensor([1.0]))


class TestGradCheck:
    def test_linear_function_is_exact(self):
        err = grad_check(T.reduce_sum, Tensor(rand(7, 11)), eps=1e-5)
        assert err < 1e-10

    def test_conv2d_matches_finite_differences(self):
        k = Tensor(rand((3, 2, 3, 3), 12), requires_grad=True)
        b = Tensor(rand(3, 13), requires_grad=True)

        def f(x):
            return T.reduce_mean(T.conv2d(x, k, b, stride=1, padding=1))

        err = grad_check(f, Tensor(rand((1, 2, 5, 5), 14)), eps=1e-5)
        assert err < 1e-6

    def test_conv2d_kernel_gradient(self):
        x = Tensor(rand((1, 2, 5, 5), 15))
        b = Tensor(np.zeros(3))

        def f(k):
            return T.reduce_mean(T.conv2d(x, k, b, stride=2, padding=1))

        err = grad_check(f, Tensor(rand((3, 2, 3, 3), 16)), eps=1e-5)
        assert err < 1e-6

    def test_matmul_gradient(self):
        b = Tensor(rand((4, 2), 17), requires_grad=True)

        def f(a):
            return T.reduce_mean(T.matmul(a, b))

        err = grad_check(f, Tensor(rand((3, 4), 18)), eps=1e-5)
        assert err < 1e-6

    @pytest.mark.parametrize(
        "name,f",
        [
            ("logistic", lambda x: T.reduce_mean(T.logistic(x))),
            ("tanh", lambda x: T.reduce_mean(T.tanh(x))),
            ("leaky_relu", lambda x: T.reduce_mean(T.leaky_relu(x, 0.1))),
            ("exp", lambda x: T.reduce_mean(T.exp(x))),
            ("softplus", lambda x: T.reduce_mean(T.softplus(x))),
            ("mul_bcast", lambda x: T.reduce_mean(T.mul(x, Tensor(rand((1, 6), 21))))),
            ("sub", lambda x: T.reduce_mean(T.mul(T.sub(x, 0.3), T.sub(x, 0.3)))),
            ("pow", lambda x: T.reduce_mean(T.pow_scalar(T.logistic(x), 2.0))),
            ("concat", lambda x: T.reduce_mean(T.concat([x, T.mul(x, x)], axis=1))),
            ("narrow", lambda x: T.reduce_mean(T.narrow(x, 1, 1, 3))),
            ("reshape", lambda x: T.reduce_mean(T.mul(T.reshape(x, (6, 5)), 2.0))),
        ],
    )
    def test_op_gradients(self, name, f):
        err = grad_check(f, Tensor(rand((5, 6), hash(name) % 1000 + 3)), eps=1e-5)
        assert err < 1e-6, name

    def test_nonfinite_intermediate_names_op(self):
        def f(x):
            return T.reduce_sum(T.log(x))  # log of a negative entry

        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericError) as exc:
                grad_check(f, Tensor(np.array([-1.0, 2.0])))
        assert exc.value.op == "log"
