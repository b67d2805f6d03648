import numpy as np
import pytest

from detno.autodiff import Tensor, concat, gelu, no_grad, softmax
from detno.errors import ContractError

from checks import assert_gradients_match, finite_difference_gradient


def check_op(build_loss, *arrays, rel_tol=1e-6, h=1e-5):
    """Analytic gradient vs central differences for every input array."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()
    for tensor, array in zip(tensors, arrays):
        numeric = finite_difference_gradient(
            lambda: float(build_loss(*[Tensor(a) for a in arrays]).data), array, h=h)
        assert_gradients_match(tensor.grad, numeric, rel_tol=rel_tol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestElementwise:
    def test_add_broadcast(self, rng):
        check_op(lambda a, b: ((a + b) * (a + b)).sum(),
                 rng.standard_normal((3, 4)), rng.standard_normal(4))

    def test_sub_mul_div(self, rng):
        a = rng.standard_normal((2, 5))
        b = rng.uniform(0.5, 2.0, (2, 5))
        check_op(lambda x, y: ((x - y) / y).sum(), a, b)

    def test_pow(self, rng):
        a = rng.uniform(0.5, 2.0, (4,))
        check_op(lambda x: (x ** -0.5).sum(), a)

    def test_neg_rsub(self, rng):
        a = rng.standard_normal((3,))
        check_op(lambda x: (1.0 - (-x)).sum(), a)

    def test_square_loss_exact(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (p * p).sum().backward()
        np.testing.assert_array_equal(p.grad, 2.0 * p.data)


class TestMatmul:
    def test_2d(self, rng):
        check_op(lambda a, b: (a @ b).sum(),
                 rng.standard_normal((3, 4)), rng.standard_normal((4, 2)))

    def test_batched(self, rng):
        check_op(lambda a, b: ((a @ b) * (a @ b)).sum(),
                 rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 3)))

    def test_broadcast_weight(self, rng):
        check_op(lambda a, b: (a @ b).sum(),
                 rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)))

    def test_shape_error(self):
        with pytest.raises(ContractError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))


class TestShapeOps:
    def test_reshape_swapaxes(self, rng):
        check_op(lambda a: (a.reshape((4, 6)).swapaxes(0, 1) ** 2.0).sum(),
                 rng.standard_normal((2, 3, 4)))

    def test_getitem_slice(self, rng):
        check_op(lambda a: (a[..., 1:3] * a[..., 1:3]).sum(),
                 rng.standard_normal((3, 5)))

    def test_getitem_fancy(self, rng):
        idx = np.array([2, 0, 1, 0])
        check_op(lambda a: (a[idx] * a[idx]).sum(), rng.standard_normal((3, 4)))

    def test_concat(self, rng):
        check_op(lambda a, b: (concat([a, b], axis=-1) ** 2.0).sum(),
                 rng.standard_normal((2, 3)), rng.standard_normal((2, 4)))


class TestReductions:
    def test_sum_axis(self, rng):
        check_op(lambda a: (a.sum(axis=1) ** 2.0).sum(), rng.standard_normal((3, 4)))

    def test_mean_keepdims(self, rng):
        check_op(lambda a: ((a - a.mean(axis=-1, keepdims=True)) ** 2.0).sum(),
                 rng.standard_normal((2, 6)))


class TestActivations:
    def test_softmax_rows_sum_to_one(self, rng):
        y = softmax(Tensor(rng.standard_normal((5, 7))), axis=-1)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_grad(self, rng):
        check_op(lambda a: (softmax(a, axis=-1) * softmax(a, axis=-1)).sum(),
                 rng.standard_normal((3, 4)))

    def test_softmax_token_axis_grad(self, rng):
        check_op(lambda a: (softmax(a, axis=-2) ** 2.0).sum(),
                 rng.standard_normal((4, 3)))

    def test_gelu_values(self):
        # erf form: gelu(0) = 0, and large inputs pass through
        x = Tensor(np.array([0.0, 10.0, -10.0]))
        y = gelu(x).data
        assert y[0] == 0.0
        assert y[1] == pytest.approx(10.0, abs=1e-12)
        assert y[2] == pytest.approx(0.0, abs=1e-12)

    def test_gelu_grad(self, rng):
        check_op(lambda a: (gelu(a) * gelu(a)).sum(), rng.standard_normal((4, 4)))


class TestGraphMechanics:
    def test_grad_accumulates_on_reuse(self, rng):
        p = Tensor(rng.standard_normal((3,)), requires_grad=True)
        ((p * p).sum() + (p * p).sum()).backward()
        np.testing.assert_allclose(p.grad, 4.0 * p.data, atol=1e-12)

    def test_unused_parameter_gets_no_grad(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        (used * used).sum().backward()
        assert unused.grad is None

    def test_backward_without_graph_raises(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(3)).sum().backward()

    def test_backward_requires_scalar(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (p * p).backward()

    def test_no_grad_blocks_recording(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = (p * p).sum()
        assert not out.requires_grad

    def test_deterministic_forward(self, rng):
        x = Tensor(rng.standard_normal((20, 8)))
        w = Tensor(rng.standard_normal((8, 8)))
        a = gelu(x @ w).data
        b = gelu(x @ w).data
        np.testing.assert_array_equal(a, b)
