import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pamoe import autodiff as ad
from pamoe.gradcheck import OP_CASES, check_op, gradcheck


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_finite_difference_100_cases(op):
    res = check_op(op, cases=100)
    assert res.worst_rel_err < 1e-4, res


def test_straight_through_forward_is_hard_backward_is_identity():
    s = ad.parameter(np.array([0.2, 0.5, 0.3]))
    out = ad.straight_through(np.array([0.0, 1.0, 0.0]), s)
    np.testing.assert_array_equal(out.values, [0.0, 1.0, 0.0])
    ad.backward(ad.sum(ad.mul(out, np.array([1.0, 2.0, 3.0]))), leaves=[s])
    np.testing.assert_array_equal(s.grad, [1.0, 2.0, 3.0])


def test_straight_through_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.straight_through(np.ones(2), ad.parameter(np.ones(3)))


def test_backward_zeroes_unreached_leaves():
    a, b = ad.parameter(np.ones(3)), ad.parameter(np.ones(3))
    b.grad = np.full(3, 7.0)
    ad.backward(ad.sum(ad.mul(a, 2.0)), leaves=[a, b])
    np.testing.assert_array_equal(a.grad, [2.0, 2.0, 2.0])
    assert not np.any(b.grad)


def test_shared_subgraph_two_roots():
    x = ad.parameter(np.array([1.0, 2.0]))
    h = ad.mul(x, x)
    ad.backward(ad.sum(h), leaves=[x])
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    ad.backward(ad.sum(ad.mul(h, 3.0)), leaves=[x])
    np.testing.assert_allclose(x.grad, [6.0, 12.0])


def test_diamond_accumulates():
    x = ad.parameter(np.array(3.0))
    y = ad.add(ad.mul(x, x), ad.mul(x, 2.0))
    ad.backward(y, leaves=[x])
    assert x.grad == pytest.approx(8.0)


def test_backward_rejects_non_scalar():
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.parameter(np.ones(2)))


def test_no_grad_builds_no_graph():
    x = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_broadcast_gradient_sums():
    a = ad.parameter(np.zeros((3, 4)))
    b = ad.parameter(np.zeros(4))
    ad.backward(ad.sum(ad.add(a, b)), leaves=[a, b])
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_take_repeated_ids_accumulate():
    t = ad.parameter(np.zeros((3, 2)))
    ad.backward(ad.sum(ad.take(t, np.array([1, 1, 2]))), leaves=[t])
    np.testing.assert_array_equal(t.grad, [[0, 0], [2, 2], [1, 1]])


def test_kl_self_is_zero_and_zero_mass_terms_vanish():
    p = np.array([0.5, 0.5, 0.0])
    assert ad.kl_divergence(p, p).item() == 0.0
    q = np.array([0.25, 0.25, 0.5])
    assert ad.kl_divergence(p, q).item() == pytest.approx(np.log(2.0))


def test_kl_rejects_non_distribution():
    with pytest.raises(ad.DomainError):
        ad.kl_divergence(np.array([0.5, 0.6]), np.array([0.5, 0.5]))


def test_kl_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.kl_divergence(np.ones(2) / 2, np.ones(3) / 3)


def test_softmax_temperature_domain():
    with pytest.raises(ad.DomainError):
        ad.softmax_temperature(np.zeros(3), 0.0)


def test_mean_pool_empty():
    with pytest.raises(ad.DomainError):
        ad.mean_pool([])


def test_cross_attention_single_key_returns_value():
    q, k, v = np.ones(4), np.zeros(4), np.arange(4.0)
    np.testing.assert_allclose(ad.cross_attention(q, k, v).values, v)


def test_lstm_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.lstm_step(np.ones(3), (np.zeros(2), np.zeros(2)),
                     (np.ones((4, 8)), np.ones((2, 8)), np.ones(8)))


def test_log_floor_blocks_gradient_below_floor():
    x = ad.parameter(np.array([1e-20, 1.0]))
    ad.backward(ad.sum(ad.log(x, floor=1e-12)), leaves=[x])
    assert x.grad[0] == 0.0 and x.grad[1] == pytest.approx(1.0)


def test_gradcheck_catches_a_wrong_backward():
    def bad(a):
        return ad._make(a.values ** 2, (a,), lambda g: (g * a.values,))  # missing factor 2
    assert gradcheck(bad, [np.array([1.0, 2.0])]) > 0.1


finite = st.floats(-5, 5, allow_nan=False)


@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_is_a_distribution(x):
    p = ad.softmax(x).values
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(ad.log_softmax(x).values, np.log(p), atol=1e-10)


@given(arrays(np.float64, (2, 6), elements=finite))
def test_layer_norm_zero_mean_unit_var(x):
    x = x + np.linspace(0, 1, 6)
    y = ad.layer_norm(x).values
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-10)
    var = x.var(-1)
    np.testing.assert_allclose(y.var(-1), var / (var + 1e-5), atol=1e-8)
