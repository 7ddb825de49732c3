"""Gradient-engine tests: analytic oracles and finite-difference properties."""

import numpy as np
import pytest

from gpoe import autodiff as ad
from gpoe.exceptions import ContractError, ShapeMismatchError


class TestForwardOps:
    def test_matmul_identity(self):
        x = ad.Tensor(np.array([[3.7]]))
        out = ad.matmul(ad.Tensor(np.eye(1)), x)
        np.testing.assert_array_equal(out.value, x.value)

    def test_matmul_identity_general(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 3))
        out = ad.matmul(ad.Tensor(np.eye(4)), ad.Tensor(x))
        np.testing.assert_array_equal(out.value, x)

    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Tensor(np.array([0.0, 0.0])), axis=0)
        np.testing.assert_allclose(out.value, [0.5, 0.5], rtol=0, atol=0)

    def test_log_exp_roundtrip(self):
        x = ad.Tensor(np.array(1.7))
        out = ad.log(ad.exp(x))
        assert abs(out.item() - 1.7) <= 1e-12

    def test_softmax_normalized_and_positive(self):
        rng = np.random.default_rng(1)
        for axis in (0, 1, -1):
            x = ad.Tensor(rng.standard_normal((5, 7)) * 10)
            s = ad.softmax(x, axis=axis).value
            assert np.all(s > 0)
            np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-9)

    def test_forward_determinism(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((6, 5)), rng.standard_normal((5, 4))

        def run():
            t = ad.relu(ad.matmul(ad.Tensor(a), ad.Tensor(b)))
            return ad.softmax(t, axis=1).value

        first, second = run(), run()
        assert np.array_equal(first, second)

    def test_matmul_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeMismatchError, match="matmul") as err:
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_elementwise_shape_error(self):
        with pytest.raises(ShapeMismatchError, match="add"):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))

    def test_row_bias_broadcast(self):
        x = ad.Tensor(np.ones((3, 2)), requires_grad=True)
        b = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = (x + b).sum()
        out.backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))
        np.testing.assert_array_equal(b.grad, [3.0, 3.0])


class TestBackward:
    def test_identity_gradient(self):
        x = ad.Tensor(np.array(5.0), requires_grad=True)
        (x * 1.0).backward()
        assert x.grad == 1.0

    def test_square_gradient(self):
        x = ad.Tensor(np.array(3.0), requires_grad=True)
        ad.square(x).backward()
        assert x.grad == pytest.approx(6.0, abs=1e-14)

    def test_product_gradient(self):
        x = ad.Tensor(np.array(2.0), requires_grad=True)
        y = ad.Tensor(np.array(7.0), requires_grad=True)
        (x * y).backward()
        assert (x.grad, y.grad) == (7.0, 2.0)

    def test_unreachable_leaf_gets_exact_zeros(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        unused = ad.Tensor(np.ones(4), requires_grad=True)
        (x.sum()).backward()
        np.testing.assert_array_equal(unused.grad, np.zeros(4))

    def test_non_scalar_output_rejected(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            (x * 2.0).backward()

    def test_fanout_gradients_accumulate(self):
        x = ad.Tensor(np.array(2.0), requires_grad=True)
        (x * x + x).backward()  # d/dx (x^2 + x) = 2x + 1
        assert x.grad == pytest.approx(5.0, abs=1e-14)

    def test_repeated_backward_is_idempotent(self):
        x = ad.Tensor(np.array(3.0), requires_grad=True)
        out = ad.square(x)
        out.backward()
        out.backward()
        assert x.grad == pytest.approx(6.0, abs=1e-14)


class TestFiniteDifferenceCheck:
    def test_linear_function_is_exact(self):
        w = np.array([1.5, -2.0, 0.25])
        err = ad.finite_difference_check(
            lambda t: (t * w).sum(), np.array([0.3, -1.0, 2.0]), step=1e-5
        )
        assert err <= 1e-10

    def test_square_truncation_bound(self):
        err = ad.finite_difference_check(
            lambda t: ad.square(t).sum(), np.array([3.0]), step=1e-5
        )
        assert err <= 1e-6

    def test_two_layer_perceptron(self):
        # 3 -> 4 -> 1 perceptron: 3*4 + 4 + 4*1 + 1 = 21 coordinates.
        rng = np.random.default_rng(42)
        x = rng.standard_normal((5, 3))
        target = rng.standard_normal((5, 1))
        theta0 = rng.uniform(-0.5, 0.5, size=21)

        def loss(theta):
            w1 = theta.value if isinstance(theta, ad.Tensor) else theta
            w1 = ad.reshape(_slice(theta, 0, 12), (3, 4))
            b1 = _slice(theta, 12, 16)
            w2 = ad.reshape(_slice(theta, 16, 20), (4, 1))
            b2 = _slice(theta, 20, 21)
            hidden = ad.relu(ad.matmul(ad.Tensor(x), w1) + b1)
            pred = ad.matmul(hidden, w2) + b2
            return ad.square(pred - target).sum()

        def _slice(theta, lo, hi):
            # Extract a contiguous run via a constant selection matrix.
            sel = np.zeros((theta.shape[0], hi - lo))
            sel[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
            return ad.matmul(ad.reshape(theta, (1, theta.shape[0])), sel).reshape(
                (hi - lo,)
            )

        err = ad.finite_difference_check(loss, theta0, step=1e-5)
        assert err <= 1e-4

    def test_bad_step_rejected(self):
        with pytest.raises(ContractError):
            ad.finite_difference_check(lambda t: t.sum(), np.ones(2), step=0.0)


def _op_cases():
    """Scalar-valued functions of one flat leaf, one per differentiable op."""
    rng = np.random.default_rng(123)
    w34 = rng.standard_normal((3, 4))
    w43 = rng.standard_normal((4, 3))
    probe = rng.standard_normal(64)
    targets = rng.uniform(0.1, 0.9, size=12)

    def reshape34(t):
        return ad.reshape(t, (3, 4))

    def weighted(out):
        return (out * probe[: out.value.size].reshape(out.shape)).sum()

    return {
        "add": lambda t: weighted(reshape34(t) + w34),
        "subtract": lambda t: weighted(reshape34(t) - w34),
        "multiply": lambda t: weighted(reshape34(t) * w34),
        "divide": lambda t: weighted(reshape34(t) / (np.abs(w34) + 1.0)),
        "matmul": lambda t: weighted(ad.matmul(reshape34(t), w43)),
        "exp": lambda t: weighted(ad.exp(0.3 * reshape34(t))),
        "log": lambda t: weighted(ad.log(ad.exp(reshape34(t)) + 1.0)),
        "sqrt": lambda t: weighted(ad.sqrt(ad.exp(reshape34(t)) + 0.5)),
        "square": lambda t: weighted(ad.square(reshape34(t))),
        "reciprocal": lambda t: weighted(ad.reciprocal(ad.exp(reshape34(t)) + 1.0)),
        "relu": lambda t: weighted(ad.relu(reshape34(t))),
        "sigmoid": lambda t: weighted(ad.sigmoid(reshape34(t))),
        "softmax0": lambda t: weighted(ad.softmax(reshape34(t), axis=0)),
        "softmax1": lambda t: weighted(ad.softmax(reshape34(t), axis=1)),
        "sum_axis": lambda t: weighted(reshape34(t).sum(axis=1)),
        "mean_axis": lambda t: weighted(reshape34(t).mean(axis=0)),
        "concat": lambda t: weighted(
            ad.concat([reshape34(t), ad.square(reshape34(t))], axis=1)
        ),
        "stack": lambda t: weighted(
            ad.stack([reshape34(t), 2.0 * reshape34(t)], axis=0)
        ),
        "moveaxis": lambda t: weighted(ad.moveaxis(reshape34(t), 0, 1)),
        "maximum": lambda t: weighted(ad.maximum(reshape34(t), 0.05)),
        "bce": lambda t: weighted(
            ad.binary_cross_entropy_with_logits(
                reshape34(t), targets.reshape(3, 4)
            )
        ),
    }


@pytest.mark.parametrize("seed", range(100))
def test_every_op_matches_central_differences(seed):
    """Analytic gradients agree with central differences to 1e-4."""
    rng = np.random.default_rng(seed)
    cases = _op_cases()
    name = list(cases)[seed % len(cases)]
    # Keep coordinates away from relu/maximum kinks.
    point = rng.uniform(0.1, 1.5, size=12) * rng.choice([-1.0, 1.0], size=12)
    err = ad.finite_difference_check(cases[name], point, step=1e-6)
    assert err <= 1e-4, f"op {name} fd error {err}"
