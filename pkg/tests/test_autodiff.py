import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bgmoment import autodiff as ad
from bgmoment.autodiff import AdamWState, Tensor, adamw_step, backward, grad_check
from bgmoment.errors import ContractError, ShapeError

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def test_primitive_examples():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3))
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    np.testing.assert_array_equal(ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1)))).data, [[3.0], [3.0]])


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_sigmoid_at_zero():
    x = Tensor(0.0, requires_grad=True)
    backward(ad.sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_mean_tanh_matches_finite_differences():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(4, 3))
    x0 = rng.normal(size=(3, 1))
    assert grad_check(lambda x: ad.mean(ad.tanh(ad.matmul(Tensor(W), x))), x0, 1e-5) < 1e-6


def test_grad_check_examples():
    rng = np.random.default_rng(1)
    assert grad_check(lambda x: ad.sum_(x), rng.normal(size=(3, 2)), 1e-5) < 1e-10
    assert grad_check(lambda x: ad.sum_(x * x), np.array([1.0, 2.0]), 1e-5) < 1e-8
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ad.sum_(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ContractError):
        grad_check(lambda x: ad.sum_(x), np.ones(2), 0.0)


def test_broadcast_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(4))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x) * 2.0
    assert not y.requires_grad


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.5, -0.5]), requires_grad=True)
    backward(ad.sum_(x * x + x))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(s > 0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_log_softmax_consistent_with_softmax(x):
    np.testing.assert_allclose(np.exp(ad.log_softmax(Tensor(x)).data), ad.softmax(Tensor(x)).data, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_composite_gradients_match_finite_differences(a, b):
    def f(x):
        h = ad.layer_norm(ad.matmul(x, Tensor(b)) + 0.1, Tensor(np.ones(2)), Tensor(np.zeros(2)))
        return ad.sum_(ad.sigmoid(h) * ad.softmax(h, axis=-1))

    assert grad_check(f, a, 1e-6) < 1e-5


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite))
def test_indexing_and_concat_gradients(x):
    def f(t):
        parts = ad.concat([t[1:3], t[[0, 0, 3]]], axis=0)
        return ad.sum_(ad.tanh(parts) * np.arange(15.0).reshape(5, 3))

    assert grad_check(f, x, 1e-6) < 1e-6


def test_adamw_zero_grad_no_decay_is_identity():
    p = ad.parameter(np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    adamw_step([p], AdamWState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_moves_by_lr():
    p = ad.parameter(np.array([1.0]))
    p.grad = np.array([1.0])
    adamw_step([p], AdamWState(lr=0.1))
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)
    assert p.grad is None


def test_adamw_decoupled_decay():
    p = ad.parameter(np.array([2.0]))
    p.grad = np.zeros(1)
    adamw_step([p], AdamWState(lr=0.1, weight_decay=0.5))
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adamw_missing_gradient_names_parameter():
    p = ad.parameter(np.ones(2), name="w_missing")
    with pytest.raises(ContractError, match="w_missing"):
        adamw_step([p], AdamWState(lr=0.1))


def test_gradient_clipping_bounds_global_norm():
    p = ad.parameter(np.zeros(2))
    p.grad = np.array([30.0, 40.0])
    state = AdamWState(lr=1.0)
    adamw_step([p], state, max_grad_norm=1.0)
    np.testing.assert_allclose(state.m[0], 0.1 * np.array([0.6, 0.8]), rtol=1e-9)
