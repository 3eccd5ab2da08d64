import numpy as np
import pytest

from pamoe import autodiff as ad
from pamoe.envs import PhasedGridWorld
from pamoe.policy import (MoEPolicy, PolicyConfig, load_checkpoint, load_policy_state,
                          policy_entropy, policy_state, sample_action, sample_actions,
                          save_checkpoint)


@pytest.fixture(scope="module")
def policy():
    env = PhasedGridWorld()
    pol = MoEPolicy(env.obs_vocab, env.goal_vocab, env.n_actions, PolicyConfig(K=3, d_model=16),
                    seed=0)
    obs, goal = env.reset(0)
    ids = pol.token_ids(obs.tokens, np.array(goal.tokens), pol.null_action)
    return pol, np.repeat(ids, 2, axis=0)


def test_fresh_adapters_do_not_change_the_backbone(policy):
    pol, ids = policy
    base = pol.expert_logits(ids, None).values
    for k in range(3):
        np.testing.assert_array_equal(pol.expert_logits(ids, k).values, base)


def test_only_q_and_v_projections_are_adapted(policy):
    pol, _ = policy
    assert {p for _, p in pol.adapted_projections()} == {"q_proj", "v_proj"}


def test_backbone_frozen_and_adapter_sets_disjoint(policy):
    pol, ids = policy
    assert not any(t.requires_grad for t in pol.backbone.values())
    ids_sets = [{id(t) for t in pol.expert_params(k)} for k in range(3)]
    assert not (ids_sets[0] & ids_sets[1]) and not (ids_sets[1] & ids_sets[2])
    loss = ad.sum(pol.expert_forward(1, ids))
    everything = pol.expert_params()
    ad.backward(ad.sum(ad.mul(pol.expert_logits(ids, 1), np.arange(9.0))), leaves=everything)
    assert any(np.any(t.grad) for t in pol.expert_params(1))
    for k in (0, 2):
        assert not any(np.any(t.grad) for t in pol.expert_params(k))
    del loss


def test_expert_index_out_of_range(policy):
    pol, ids = policy
    with pytest.raises(IndexError):
        pol.expert_logits(ids, 3)


def test_encode_shapes(policy):
    pol, ids = policy
    enc = pol.encode(ids)
    assert enc.obs.shape == (2, 16) and enc.goal.shape == (2, 16) and enc.logits.shape == (2, 9)


def test_checkpoint_round_trip(tmp_path, policy):
    pol, _ = policy
    state = policy_state(pol)
    save_checkpoint(tmp_path / "c.bin", state)
    loaded = load_checkpoint(tmp_path / "c.bin")
    assert set(loaded) == set(state)
    for k in state:
        np.testing.assert_array_equal(loaded[k], state[k])
    load_policy_state(pol, loaded)
    with pytest.raises(ValueError):
        (tmp_path / "bad.bin").write_bytes(b"nope\n")
        load_checkpoint(tmp_path / "bad.bin")


def test_sampling_frequencies():
    rng = np.random.default_rng(0)
    p = np.full(9, 1 / 9)
    draws = sample_actions(np.tile(p, (90_000, 1)), rng)
    freq = np.bincount(draws, minlength=9) / draws.size
    assert np.all(np.abs(freq - 1 / 9) < 0.005)
    a, lp = sample_action(np.array([0.0, 1.0]), rng)
    assert a == 1 and lp == 0.0


def test_entropy_bits():
    assert policy_entropy(np.full(4, 0.25)) == pytest.approx(2.0)
    assert policy_entropy(np.array([1.0, 0.0])) == 0.0
