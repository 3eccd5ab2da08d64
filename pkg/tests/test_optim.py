import numpy as np
import pytest

from pamoe import autodiff as ad
from pamoe.optim import Adam, clip_grad_norm, global_grad_norm


def _reference_adam(x, grads, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    m = v = np.zeros_like(x)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(6)]
    p = ad.parameter(x0.copy())
    opt = Adam([p], lr=0.1)
    for g in grads:
        p.grad = g
        opt.step()
    np.testing.assert_allclose(p.values, _reference_adam(x0, grads), rtol=0, atol=1e-14)


def test_adam_skips_all_zero_gradient():
    p = ad.parameter(np.ones(3))
    opt = Adam([p], lr=0.1)
    p.grad = np.ones(3)
    opt.step()
    after_one = p.values.copy()
    p.grad = np.zeros(3)
    opt.step()
    np.testing.assert_array_equal(p.values, after_one)
    assert opt.steps == [1]


def test_adam_without_skip_moves_on_momentum():
    p = ad.parameter(np.ones(3))
    opt = Adam([p], lr=0.1, skip_zero_grad=False)
    p.grad = np.ones(3)
    opt.step()
    before = p.values.copy()
    p.grad = np.zeros(3)
    opt.step()
    assert np.all(p.values < before)


def test_clip_grad_norm():
    a, b = ad.parameter(np.zeros(2)), ad.parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert global_grad_norm([a, b]) == pytest.approx(1.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.0])


def test_clip_leaves_small_norm_untouched():
    a = ad.parameter(np.zeros(2))
    a.grad = np.array([0.3, 0.4])
    clip_grad_norm([a], 1.0)
    np.testing.assert_array_equal(a.grad, [0.3, 0.4])
