import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vdanlg import autodiff as ad


def P(x):
    return ad.parameter(np.asarray(x, dtype=float))


def test_relu_sigmoid_mean_pool_examples():
    assert ad.relu(P([-1.0, 0.0, 2.0])).value.tolist() == [0.0, 0.0, 2.0]
    assert ad.sigmoid(P([0.0])).value.tolist() == [0.5]
    assert ad.mean_pool(P([[1.0, 3.0], [3.0, 5.0]])).value.tolist() == [2.0, 4.0]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(P([1.0, 2.0]), P([1.0, 2.0, 3.0]))
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2,\)"):
        ad.matmul(P(np.ones((2, 3))), P([1.0, 2.0]))


def test_grad_reverse_forward_and_backward():
    x = P([1.5, -2.0])
    y = ad.grad_reverse(x, ad.GradReverseConfig(1.0))
    assert y.value.tolist() == [1.5, -2.0]
    for lam, expected in [(1.0, [-2.0, 4.0]), (0.5, [-1.0, 2.0])]:
        x = P([1.5, -2.0])
        y = ad.grad_reverse(x, lam)
        # upstream gradient g = [2, -4] via a weighted sum
        loss = ad.matmul(y, ad.constant([2.0, -4.0]))
        ad.backward(loss)
        assert x.grad.tolist() == expected


def test_grad_reverse_config_bounds():
    with pytest.raises(ValueError):
        ad.GradReverseConfig(1.5)


def test_backward_examples():
    x = P(3.0)
    ad.backward(ad.mul(x, x))
    assert float(x.grad) == 6.0

    x = P([1.0, -2.0, 0.5])
    ad.backward(ad.sum_(ad.grad_reverse(x, 1.0)))
    assert x.grad.tolist() == [-1.0, -1.0, -1.0]

    x, unused = P([1.0]), P([4.0])
    ad.backward(ad.sum_(ad.tanh(x)))
    assert unused.grad.tolist() == [0.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.tanh(P([1.0, 2.0])))


def test_fan_out_sums_path_adjoints():
    rng = np.random.default_rng(3)
    xv = rng.normal(size=4)
    # shared node feeding two consumers
    x = P(xv)
    h = ad.tanh(x)
    loss = ad.add(ad.sum_(ad.sigmoid(h)), ad.sum_(ad.mul(h, h)))
    ad.backward(loss)
    # manually split graph: two independent copies, gradients added by hand
    x1, x2 = P(xv), P(xv)
    ad.backward(ad.sum_(ad.sigmoid(ad.tanh(x1))))
    h2 = ad.tanh(x2)
    ad.backward(ad.sum_(ad.mul(h2, h2)))
    np.testing.assert_allclose(x.grad, x1.grad + x2.grad, rtol=0, atol=1e-15)


def test_check_gradients_constant_and_sigmoid():
    rng = np.random.default_rng(0)
    W = P(rng.uniform(-0.5, 0.5, (3, 4)))
    xv = rng.normal(size=4)
    err = ad.check_gradients(lambda: ad.sum_(ad.sigmoid(ad.matmul(W, ad.constant(xv)))), [W], 1e-6)
    assert err < 1e-4
    c = P([1.0, 2.0])
    assert ad.check_gradients(lambda: ad.constant(5.0), [c], 1e-5) == 0.0


def test_check_gradients_through_grl_scales_by_minus_lambda():
    rng = np.random.default_rng(1)
    x = P(rng.normal(size=3))
    for lam in (0.0, 0.5, 1.0):
        f = lambda: ad.sum_(ad.tanh(ad.grad_reverse(x, lam)))  # noqa: E731
        assert ad.check_gradients(f, [x], 1e-6, expected_scale=-lam) < 1e-6
        if lam > 0:
            # plain comparison must fail: analytic is the reversed derivative
            assert ad.check_gradients(f, [x], 1e-6) > 1.0


def test_check_gradients_rejects_unseeded_noise():
    x = P([0.3, 0.2, 0.9])
    rng = np.random.default_rng(0)
    with pytest.raises(ad.NonDeterministicGraph):
        ad.check_gradients(lambda: ad.sum_(ad.dropout(x, 0.5, rng)), [x], 1e-6)


@pytest.mark.skipif(np.finfo(np.longdouble).eps >= np.finfo(np.float64).eps,
                    reason="long double is plain float64 on this platform")
def test_check_gradients_extended_precision_reference():
    # a tiny slope on a large offset: float64 differences are quantized at ulp(10)
    x = P([0.7])

    def f():
        return ad.add(ad.constant(10.0), ad.scale(ad.sum_(x), 3e-9))

    assert ad.check_gradients(f, [x], 1e-4) > 1e-4
    assert ad.check_gradients(f, [x], 1e-4, numeric_dtype=np.longdouble) < 1e-5
    assert x.value.dtype == np.float64 and x.value.tolist() == [0.7]
    assert f().value.dtype == np.float64


def test_check_gradients_eps_range():
    x = P([1.0])
    with pytest.raises(ValueError):
        ad.check_gradients(lambda: ad.sum_(x), [x], 1e-2)


def test_dropout_inverted_scaling_and_identity_at_inference():
    x = P(np.ones(10000))
    y = ad.dropout(x, 0.7, np.random.default_rng(0))
    kept = y.value[y.value > 0]
    np.testing.assert_allclose(kept, 1 / 0.7)
    assert abs(y.value.mean() - 1.0) < 0.03
    assert ad.dropout(x, 0.7, None, train=False) is x


def test_no_grad_records_nothing():
    x = P([1.0])
    with ad.no_grad():
        y = ad.tanh(x)
    assert y.parents == ()


def test_softmax_stable_on_large_logits():
    z = P([1000.0, 0.0, -1000.0])
    p = ad.softmax(z)
    assert np.all(np.isfinite(p.value)) and abs(p.value.sum() - 1) < 1e-12
    xe = ad.softmax_cross_entropy(z, 2)
    assert np.isfinite(xe.value) and float(xe.value) == pytest.approx(2000.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_forward_finite_on_finite_inputs(xs):
    x = P(xs)
    for op in (ad.sigmoid, ad.tanh, ad.relu, ad.softmax, ad.log_softmax):
        assert ad.is_finite(op(x))
    assert ad.is_finite(ad.softmax_cross_entropy(x, 0))


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
def test_grad_reverse_forward_bit_exact(xs):
    x = np.array(xs)
    assert np.array_equal(ad.grad_reverse(P(x), 0.7).value, x)
