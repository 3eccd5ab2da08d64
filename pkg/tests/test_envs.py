import numpy as np
import pytest

from pamoe.envs import (Action, CATEGORIES, COMPLEX, ConfigError, EnvConfig, LinearChainEnv,
                        MANIPULATIONS, N_ACTIONS, Phase, PhasedGridWorld, SEQUENCES, SIMPLE,
                        UsageError, resolve_category_mix)
from pamoe.warmup import scripted_distribution


def test_default_mix_frequencies_within_two_percent():
    env = PhasedGridWorld()
    cats = [env.reset(s)[1].task_category for s in range(10_000)]
    simple = np.mean([c in SIMPLE for c in cats])
    assert abs(simple - 0.6) < 0.02
    assert abs((1 - simple) - 0.4) < 0.02


def test_mix_resolution_and_errors():
    mix = resolve_category_mix({"simple": 0.5, "Heat": 0.5})
    assert mix["PickPlace"] == pytest.approx(0.25) and mix["Heat"] == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        resolve_category_mix({"Bake": 1.0})
    with pytest.raises(ConfigError):
        resolve_category_mix({"simple": 0.5})
    with pytest.raises(ConfigError):
        EnvConfig(p_fault=1.0).validate()


def test_reset_is_deterministic():
    a, b = PhasedGridWorld(), PhasedGridWorld()
    oa, ga = a.reset(123, fault_seed=4)
    ob, gb = b.reset(123, fault_seed=4)
    np.testing.assert_array_equal(oa.tokens, ob.tokens)
    assert ga == gb and a.targets == b.targets and a.distractors == b.distractors


def test_step_after_done_raises():
    env = PhasedGridWorld(EnvConfig(max_steps=1))
    env.reset(0)
    assert env.step(Action.LOOK).done
    with pytest.raises(UsageError):
        env.step(Action.LOOK)


def test_complex_needs_more_manipulations():
    for c in SIMPLE:
        assert len(SEQUENCES[c]) == 1
    for c in COMPLEX:
        reps = 2 if c == "Pick2" else 1
        assert len(SEQUENCES[c]) * reps >= 3


def _solve(env, rng):
    """Drive the env with the teacher at full confidence; returns phases seen."""
    phases = []
    while not env.done:
        p = scripted_distribution(env)
        a = int(np.argmax(p + rng.uniform(0, 1e-9, p.shape)))
        phases.append(env.oracle_phase())
        env.step(a)
    return phases


def test_oracle_phases_and_success_without_faults():
    rng = np.random.default_rng(0)
    env = PhasedGridWorld(EnvConfig(p_fault=0.0, max_steps=200))
    wins = 0
    for s in range(30):
        env.reset(s)
        phases = _solve(env, rng)
        wins += env.success
        if env.success:
            assert phases[-1] == Phase.MANIPULATE
        assert Phase.RECOVER not in phases
    assert wins >= 25


def test_fault_enters_recover_and_retry_clears():
    env = PhasedGridWorld(EnvConfig(p_fault=0.99, max_steps=200))
    rng = np.random.default_rng(1)
    env.reset(5)
    while not env.done and not env.fault:
        env.step(int(np.argmax(scripted_distribution(env) + rng.uniform(0, 1e-9, N_ACTIONS))))
    assert env.fault and env.oracle_phase() == Phase.RECOVER
    env.step(Action.RETRY)
    assert not env.fault


def test_wrong_manipulation_resets_complex_progress():
    env = PhasedGridWorld(EnvConfig(p_fault=0.0, max_steps=300, category_mix={"Heat": 1.0}))
    env.reset(3)
    rng = np.random.default_rng(2)
    while not (env.adjacent() and env.located):
        env.step(int(np.argmax(scripted_distribution(env) + rng.uniform(0, 1e-9, N_ACTIONS))))
    env.step(env.sequence[0])
    assert env.progress == 1
    wrong = next(a for a in MANIPULATIONS if a != env.sequence[1])
    env.step(wrong)
    assert env.progress == 0


def test_sparse_terminal_reward():
    env = PhasedGridWorld(EnvConfig(p_fault=0.0, max_steps=200))
    rng = np.random.default_rng(3)
    env.reset(7)
    rewards = []
    while not env.done:
        a = int(np.argmax(scripted_distribution(env) + rng.uniform(0, 1e-9, N_ACTIONS)))
        rewards.append(env.step(a).reward)
    assert sum(rewards) == (1.0 if env.success else 0.0)
    assert all(r == 0.0 for r in rewards[:-1])


def test_observation_vocab_bounds():
    env = PhasedGridWorld()
    obs, goal = env.reset(11)
    assert len(obs.tokens) == len(env.obs_vocab)
    assert np.all(obs.tokens < np.array(env.obs_vocab)) and np.all(obs.tokens >= 0)
    assert goal.tokens[0] == CATEGORIES.index(goal.task_category)


def test_linear_chain_optimum():
    env = LinearChainEnv(6, 2)
    assert env.optimal_return() == pytest.approx(1.0)
    env.reset()
    total = sum(env.step(0 if t < 2 else 1).reward for t in range(6))
    assert total == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        LinearChainEnv(4, 4)
