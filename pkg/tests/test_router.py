import numpy as np
import pytest
from hypothesis import given, strategies as st

from pamoe import autodiff as ad
from pamoe.autodiff import DomainError
from pamoe.router import (AnnealSchedule, PhaseRouter, RouterConfig, RouterParams, RouterState,
                          anneal_temperature, argmax_lowest, count_switches,
                          straight_through_select, switching_penalty)


def _router(**kw):
    cfg = RouterConfig(K=4, L=5, d=16, n_layers=3, **kw)
    return PhaseRouter(RouterParams(cfg, d_model=16, n_actions=9, seed=0))


def test_schedule_endpoints():
    s = AnnealSchedule(2.0, 0.5, 3000)
    assert s(0) == 2.0 and s(3000) == 0.5 and s(10**6) == 0.5
    assert s(1500) == pytest.approx(1.25)
    with pytest.raises(DomainError):
        anneal_temperature(s, -1)


def test_argmax_ties_go_low():
    assert argmax_lowest(np.array([0.3, 0.3, 0.2, 0.2])) == 0
    np.testing.assert_array_equal(argmax_lowest(np.array([[0.1, 0.9], [0.5, 0.5]])), [1, 0])


def test_count_switches():
    assert count_switches([0, 0, 1, 1, 0]) == 2
    assert count_switches([3]) == 0
    with pytest.raises(DomainError):
        count_switches([])


@given(st.integers(2, 12), st.integers(2, 6), st.integers(0, 10**6))
def test_switch_penalty_gradient_closed_form(T, K, seed):
    rng = np.random.default_rng(seed)
    p = ad.parameter(rng.dirichlet(np.ones(K), size=T))
    loss = switching_penalty(p, 0.05)
    ad.backward(loss, leaves=[p])
    want = np.zeros((T, K))
    want[:-1] = -0.05 / (T - 1) * p.values[1:]
    np.testing.assert_allclose(p.grad, want, rtol=0, atol=1e-10)
    z = argmax_lowest(p.values, axis=-1)
    assert loss.item() == pytest.approx(0.05 / (T - 1) * count_switches(z))


def test_switch_penalty_single_step_and_empty():
    assert switching_penalty(np.ones((1, 3)) / 3).item() == 0.0
    with pytest.raises(DomainError):
        switching_penalty(np.zeros((0, 3)))


def test_straight_through_select():
    p = ad.parameter(np.array([[0.2, 0.8], [0.6, 0.4]]))
    z, w = straight_through_select(p)
    np.testing.assert_array_equal(z, [1, 0])
    np.testing.assert_array_equal(w.values, [1.0, 1.0])
    ad.backward(ad.sum(ad.mul(w, np.array([2.0, 3.0]))), leaves=[p])
    np.testing.assert_array_equal(p.grad, [[0, 2], [3, 0]])


def test_router_probs_are_distributions_and_temperature_sharpens():
    r = _router()
    rng = np.random.default_rng(0)
    o, g = rng.normal(size=(3, 16)), rng.normal(size=(3, 16))
    acts = np.full((3, 5), 9)
    obs = np.zeros((3, 5, 16))
    mask = np.zeros((3, 5), bool)
    hot = r.probs(o, g, acts, obs, mask, 2.0).values
    cold = r.probs(o, g, acts, obs, mask, 0.5).values
    np.testing.assert_allclose(hot.sum(-1), 1.0)
    assert np.all(cold.max(-1) >= hot.max(-1))
    np.testing.assert_array_equal(hot.argmax(-1), cold.argmax(-1))
    with pytest.raises(DomainError):
        r.probs(o, g, acts, obs, mask, 0.0)


def test_history_changes_routing_only_when_enabled():
    rng = np.random.default_rng(1)
    o, g = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
    empty = (np.full((1, 5), 9), np.zeros((1, 5, 16)), np.zeros((1, 5), bool))
    full = (rng.integers(0, 9, (1, 5)), rng.normal(size=(1, 5, 16)), np.ones((1, 5), bool))
    on = _router()
    assert not np.allclose(on.probs(o, g, *empty, 1.0).values, on.probs(o, g, *full, 1.0).values)
    off = _router(use_history=False)
    np.testing.assert_array_equal(off.probs(o, g, *empty, 1.0).values,
                                  off.probs(o, g, *full, 1.0).values)


def test_goal_attention_toggle():
    rng = np.random.default_rng(2)
    o = rng.normal(size=(1, 16))
    hist = (np.full((1, 5), 9), np.zeros((1, 5, 16)), np.zeros((1, 5), bool))
    off = _router(use_goal_attention=False)
    a = off.probs(o, rng.normal(size=(1, 16)), *hist, 1.0).values
    b = off.probs(o, rng.normal(size=(1, 16)), *hist, 1.0).values
    np.testing.assert_array_equal(a, b)
    on = _router()
    g1, g2 = rng.normal(size=(1, 16)), rng.normal(size=(1, 16))
    assert not np.allclose(on.probs(o, g1, *hist, 1.0).values, on.probs(o, g2, *hist, 1.0).values)


def test_router_state_window_left_padded():
    s = RouterState(3, 2, 9)
    acts, obs, mask = s.window()
    assert list(acts) == [9, 9, 9] and not mask.any()
    for a in range(5):
        s.record(a, np.full(2, a))
    acts, obs, mask = s.window()
    assert list(acts) == [2, 3, 4] and mask.all() and obs[0, 0] == 2
    s.reset()
    assert len(s) == 0


def test_route_single_step():
    r = _router()
    st_ = RouterState(5, 16, 9)
    out = r.route(st_, np.ones(16), np.ones(16), 1.0)
    assert out.z == int(np.argmax(out.p)) and out.tau_used == 1.0
