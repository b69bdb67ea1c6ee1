import numpy as np
import pytest

from latticerf import autodiff as ad
from conftest import numeric_grad


def check(build, *shapes, rng=None, positive=False, tol=1e-6):
    """Compare analytic and numeric gradients of ``sum(w * build(*xs))``."""
    rng = rng or np.random.default_rng(0)
    xs = []
    for s in shapes:
        v = rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s)
        xs.append(ad.parameter(v))
    out = build(*xs)
    w = rng.normal(size=out.shape)

    def f():
        with ad.no_grad():
            return float(np.sum(w * build(*xs).data))

    ad.backward(ad.tsum(build(*xs) * w))
    for x in xs:
        num = numeric_grad(f, x.data)
        np.testing.assert_allclose(x.grad, num, rtol=tol, atol=tol)


@pytest.mark.parametrize("op", [
    lambda a, b: a + b, lambda a, b: a - b, lambda a, b: a * b, lambda a, b: a / (b * b + 1.0),
])
def test_binary_ops_with_broadcasting(op):
    check(op, (4, 3), (3,))
    check(op, (4, 1), (1, 3))


@pytest.mark.parametrize("op", [ad.exp, ad.sigmoid, ad.softplus, lambda a: a ** 3, lambda a: -a,
                                lambda a: 2.0 - a, lambda a: 3.0 / (a * a + 1.0)])
def test_unary_ops(op):
    check(op, (5, 2))


@pytest.mark.parametrize("op", [ad.log, ad.sqrt])
def test_unary_ops_positive_domain(op):
    check(op, (6,), positive=True)


def test_relu_away_from_kink():
    x = ad.parameter(np.array([-2.0, -0.5, 0.3, 1.7]))
    ad.backward(ad.tsum(ad.relu(x) * np.array([1.0, 2.0, 3.0, 4.0])))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 3.0, 4.0])


def test_sqrt_gradient_at_zero_is_zero():
    x = ad.parameter(np.array([0.0, 4.0]))
    ad.backward(ad.tsum(ad.sqrt(x)))
    assert x.grad[0] == 0.0 and x.grad[1] == pytest.approx(0.25)


def test_reductions_and_shapes():
    check(lambda a: ad.tsum(a, axis=1), (3, 4))
    check(lambda a: ad.tsum(a, axis=0, keepdims=True), (3, 4))
    check(lambda a: ad.mean(a, axis=1), (3, 4))
    check(lambda a: ad.cumsum(a, axis=1), (3, 5))
    check(lambda a: ad.reshape(a, (2, 6)), (3, 4))
    check(lambda a: ad.transpose(a), (3, 4))
    check(lambda a: a[:, 1:3], (3, 4))
    check(lambda a: a[np.array([0, 2, 2])], (3, 4))


def test_gather_scatter_ops():
    idx = np.array([[0, 3], [3, 3], [1, 0]])
    check(lambda a: ad.take_rows(a, idx), (4, 2))
    seg = np.array([2, 0, 2, 1, 2])
    check(lambda a: ad.segment_sum(a, seg, 4), (5, 3))


def test_combination_ops():
    check(lambda a, b: ad.concat([a, b], axis=1), (3, 2), (3, 4))
    check(lambda a, b: ad.stack([a, b], axis=1), (3, 2), (3, 2))
    check(lambda a, b: a @ b, (3, 4), (4, 2))
    check(lambda x, w, b: ad.linear(x, w, b), (5, 3), (3, 4), (4,))


def test_where_routes_gradients():
    cond = np.array([True, False, True])
    check(lambda a, b: ad.where(cond, a, b), (3,), (3,))


def test_shared_subexpression_accumulates():
    x = ad.parameter(np.array([1.5, -2.0]))
    y = x * x + x
    ad.backward(ad.tsum(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_ndarray_on_left_defers_to_tensor():
    x = ad.parameter(np.ones(3))
    out = np.array([1.0, 2.0, 3.0]) - x
    assert isinstance(out, ad.Tensor)
    out = np.ones(3) * x + np.zeros(3)
    assert isinstance(out, ad.Tensor)


def test_backward_rejects_non_finite_loss():
    x = ad.parameter(np.array([0.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.backward(ad.tsum(ad.log(x)))


def test_no_grad_builds_no_graph():
    x = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_backward_needs_scalar_without_seed():
    x = ad.parameter(np.ones(2))
    with pytest.raises(ValueError):
        ad.backward(x * 2.0)


def test_record_kinks_collects_relu_masks():
    x = ad.Tensor(np.array([-1.0, 2.0]))
    with ad.record_kinks() as masks:
        ad.relu(x)
    assert len(masks) == 1 and masks[0].tolist() == [False, True]
