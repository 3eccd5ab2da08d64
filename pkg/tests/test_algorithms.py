import math
import statistics

import numpy as np
import pytest

from pamoe import autodiff as ad
from pamoe.algorithms import (ExpertBuffer, LossBreakdown, TrajectoryGroup, balance_loss,
                              clipped_surrogate, diversity_loss, gae_advantages,
                              gigpo_group_advantages, grpo_advantages, mean_pairwise_kl,
                              rloo_advantages, surrogate_terms)
from pamoe.autodiff import DomainError, ShapeError
from pamoe.config import parse_config
from pamoe.training import Agent, Trainer, compute_advantages

N_INSTANCES = 1000


def _gae_brute(r, v, gamma, lam):
    T = len(r)
    deltas = [r[t] + gamma * v[t + 1] - v[t] for t in range(T)]
    return [sum((gamma * lam) ** l * deltas[t + l] for l in range(T - t)) for t in range(T)]


def test_gae_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(N_INSTANCES):
        T = int(rng.integers(1, 9))
        r, v = rng.normal(size=T), rng.normal(size=T + 1)
        g, lam = rng.uniform(0, 1), rng.uniform(0, 1)
        np.testing.assert_allclose(gae_advantages(r, v, g, lam), _gae_brute(r, v, g, lam),
                                   rtol=0, atol=1e-10)


def test_gae_errors():
    with pytest.raises(ShapeError):
        gae_advantages([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(DomainError):
        gae_advantages([1.0], [0.0, 0.0], gamma=1.5)


def test_rloo_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(N_INSTANCES):
        n = int(rng.integers(2, 9))
        R = rng.normal(size=n)
        want = [R[i] - sum(R[j] for j in range(n) if j != i) / (n - 1) for i in range(n)]
        np.testing.assert_allclose(rloo_advantages(R), want, rtol=0, atol=1e-10)
    with pytest.raises(DomainError):
        rloo_advantages([1.0])


def test_grpo_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(N_INSTANCES):
        n = int(rng.integers(2, 9))
        R = list(rng.normal(size=n))
        mu, sd = statistics.fmean(R), statistics.pstdev(R)
        want = [(x - mu) / (sd + 1e-8) for x in R]
        np.testing.assert_allclose(grpo_advantages(np.array(R)), want, rtol=0, atol=1e-10)
        np.testing.assert_allclose(grpo_advantages(np.array(R), standardize=False),
                                   [x - mu for x in R], rtol=0, atol=1e-10)


def test_grpo_constant_group_is_zero():
    np.testing.assert_array_equal(grpo_advantages(np.ones(4)), np.zeros(4))


def test_surrogate_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(N_INSTANCES):
        n = int(rng.integers(1, 7))
        new, old, A = rng.normal(0, 0.3, n), rng.normal(0, 0.3, n), rng.normal(size=n)
        eps = rng.uniform(0.05, 0.4)
        want = []
        for a, b, adv in zip(new, old, A):
            rho = math.exp(a - b)
            want.append(min(rho * adv, min(max(rho, 1 - eps), 1 + eps) * adv))
        got = surrogate_terms(ad.tensor(new), old, A, eps).values
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)
        assert clipped_surrogate(new, old, A, eps).item() == pytest.approx(-np.mean(want), abs=1e-10)


def test_surrogate_gradient_vanishes_when_clipped():
    new = ad.parameter(np.array([0.5]))          # rho = e^0.5 > 1.2
    ad.backward(clipped_surrogate(new, np.zeros(1), np.ones(1), 0.2), leaves=[new])
    assert new.grad[0] == 0.0


def test_gigpo_hand_example():
    # two trajectories share their first state; second states differ
    g = TrajectoryGroup([np.array([0.0, 1.0]), np.array([0.0, 0.0])], [["s", "a"], ["s", "b"]])
    est = gigpo_group_advantages(g, step_gamma=0.5)
    ep = np.array([1.0, -1.0]) * (0.5 / (0.5 + 1e-8))
    # cluster "s": returns-to-go 0.5 and 0 -> standardized +1, -1
    step = np.array([0.25, -0.25]) / (0.25 + 1e-8)
    np.testing.assert_allclose(est.values[0], [0.5 * (ep[0] + step[0]), ep[0]])
    np.testing.assert_allclose(est.values[1], [0.5 * (ep[1] + step[1]), ep[1]])
    with pytest.raises(ShapeError):
        gigpo_group_advantages(TrajectoryGroup([np.zeros(2)], [["x"]]))


def test_balance_loss_closed_forms():
    assert balance_loss(np.full(4, 0.25)).item() == 0.0
    assert balance_loss(np.array([1.0, 0, 0, 0])).item() == pytest.approx(0.75)
    with pytest.raises(DomainError):
        balance_loss(np.array([0.5, 0.4]))


def test_diversity_loss_identical_experts():
    p = ad.tensor(np.tile([0.2, 0.3, 0.5], (6, 1)))
    assert diversity_loss([p, p], 0.1).item() == pytest.approx(0.2)
    assert ad.kl_divergence(p, p).values.max() == 0.0


def test_diversity_loss_far_experts_is_zero():
    a = ad.tensor(np.array([[0.98, 0.01, 0.01]]))
    b = ad.tensor(np.array([[0.01, 0.01, 0.98]]))
    assert diversity_loss([a, b], 0.1).item() == 0.0
    assert mean_pairwise_kl([a.values, b.values])[0] > 1.0


def test_expert_buffer_capacity_and_sampling():
    buf = ExpertBuffer(2, capacity=3)
    for i in range(5):
        buf.add(0, np.array([i]), np.zeros(2))
    buf.add(1, np.array([9]), np.zeros(2))
    assert buf.sizes() == [3, 1]
    rng = np.random.default_rng(0)
    s = buf.sample(2, rng)
    assert s.shape == (2, 1) and len(set(s[:, 0])) == 2
    assert sorted(buf.sample(10, rng)[:, 0]) == [2, 3, 4, 9]


def test_loss_breakdown_recomposes():
    lb = LossBreakdown(1.0, 2.0, 3.0, 4.0, 1.0 + 0.02 + 0.003 + 4.0, 0.01, 0.001, 1.0)
    assert lb.recomposed() == pytest.approx(lb.total)


# ---------------------------------------------------------------- PPO equivalence

def _reference_ppo_update(policy, batch, eps, vcoef, lr, gamma, lam, max_norm):
    """Single-policy PPO written from scratch: GAE, clipped loss, value loss, clip, Adam."""
    A = np.zeros(len(batch))
    for tr in batch.trajectories:
        r = batch.reward[tr.start:tr.stop]
        v = list(batch.value_old[tr.start:tr.stop]) + [0.0]
        A[tr.start:tr.stop] = _gae_brute(r, v, gamma, lam)
    params = policy.expert_params(0) + list(policy.value_head.values())
    logp = ad.log_softmax(policy.expert_logits(batch.ids, 0), axis=-1)
    lp = ad.index(logp, (np.arange(len(batch)), batch.action))
    ratio = ad.exp(ad.sub(lp, batch.logp_old))
    obj = ad.minimum(ad.mul(ratio, A), ad.mul(ad.clip(ratio, 1 - eps, 1 + eps), A))
    err = ad.sub(policy.value(batch.pooled), A + batch.value_old)
    loss = ad.add(ad.neg(ad.mean(obj)), ad.mul(ad.mean(ad.mul(err, err)), vcoef))
    ad.backward(loss, leaves=params)
    norm = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params))
    scale = max_norm / (norm + 1e-12) if norm > max_norm else 1.0
    out = {}
    for p in params:
        g = p.grad * scale
        if not np.any(g):
            out[p.name] = p.values.copy()
            continue
        m, v = 0.1 * g, 0.001 * g * g
        out[p.name] = p.values - lr * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
    return A, out


def test_single_adapter_gae_is_reference_ppo():
    cfg = parse_config({"policy": {"K": 1}, "routing": "none",
                        "algorithm": {"algorithm": "ppo", "n_group": 3},
                        "training": {"groups_per_batch": 2}})
    tr = Trainer(cfg, 0, agent=Agent(cfg, 0, warm=False))
    pol = tr.agent.policy
    # give the critic non-zero weights so GAE sees real values
    pol.value_head["value.w"].values[...] = np.random.default_rng(5).normal(0, 0.1, cfg.policy.d_model)
    batch = tr.collect()
    A = compute_advantages(batch, cfg)
    start = {p.name: p.values.copy() for p in tr.agent.trainable()}
    alg = cfg.algorithm
    A_ref, want = _reference_ppo_update(pol, batch, alg.epsilon, alg.value_coef, alg.lr,
                                        alg.gae_gamma, alg.gae_lambda, alg.max_grad_norm)
    np.testing.assert_allclose(A, A_ref, rtol=0, atol=1e-10)
    for p in tr.agent.trainable():
        p.values[...] = start[p.name]
    tr.train_step(batch, A)
    for p in tr.agent.trainable():
        np.testing.assert_allclose(p.values, want[p.name], rtol=0, atol=1e-12, err_msg=p.name)
