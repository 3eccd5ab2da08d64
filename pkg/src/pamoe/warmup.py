"""Backbone warm-up: behaviour cloning of a scripted, semi-competent policy.

The backbone is frozen during RL, so it has to encode something useful
first. The scripted teacher wanders while exploring, walks toward a located
target, mostly retries after a fault, and runs the interaction sequence
reliably on simple tasks but only loosely on complex ones. The backbone is
fit to the teacher's action distributions (soft targets) and then frozen.
"""
from __future__ import annotations

import functools
import json
import logging

import numpy as np

from . import autodiff as ad
from .envs import (Action, EnvConfig, MANIPULATIONS, MOVES, N_ACTIONS, Phase,
                   PhasedGridWorld, SIMPLE)
from .optim import Adam, clip_grad_norm
from .policy import MoEPolicy, PolicyConfig

__all__ = ["scripted_distribution", "collect_teacher_data", "pretrain_backbone",
           "warm_backbone_state", "TEACHER"]

log = logging.getLogger(__name__)

# probability mass the teacher puts on its intended actions, per phase
TEACHER = {
    "explore_moves": 0.85,
    "navigate_greedy": 0.75,
    "recover_retry": 0.9,
    "simple_correct": 0.75,
    "complex_correct": 0.3,
    "complex_other_manip": 0.4,
}


def _uniform(mass: float) -> np.ndarray:
    return np.full(N_ACTIONS, mass / N_ACTIONS)


def scripted_distribution(env: PhasedGridWorld) -> np.ndarray:
    """Teacher action distribution for the current state of ``env``."""
    phase = env.oracle_phase()
    if phase == Phase.RECOVER:
        p = _uniform(1 - TEACHER["recover_retry"])
        p[Action.RETRY] += TEACHER["recover_retry"]
        return p
    if phase == Phase.EXPLORE:
        mass = TEACHER["explore_moves"]
        p = _uniform(1 - mass)
        free = [a for a, (di, dj) in MOVES.items()
                if not env._blocked((env.agent[0] + di, env.agent[1] + dj))] or list(MOVES)
        for a in free:
            p[a] += mass / len(free)
        return p
    if phase == Phase.NAVIGATE:
        mass = TEACHER["navigate_greedy"]
        p = _uniform(1 - mass)
        ti, tj = env.target
        ai, aj = env.agent
        here = abs(ti - ai) + abs(tj - aj)
        good = []
        for a, (di, dj) in MOVES.items():
            c = (ai + di, aj + dj)
            if not env._blocked(c) and abs(ti - c[0]) + abs(tj - c[1]) < here:
                good.append(a)
        if not good:
            good = [a for a, (di, dj) in MOVES.items()
                    if not env._blocked((ai + di, aj + dj))] or list(MOVES)
        for a in good:
            p[a] += mass / len(good)
        return p
    expected = env.sequence[env.progress]
    if env.category in SIMPLE:
        p = _uniform(1 - TEACHER["simple_correct"])
        p[expected] += TEACHER["simple_correct"]
        return p
    correct, other = TEACHER["complex_correct"], TEACHER["complex_other_manip"]
    p = _uniform(1 - correct - other)
    p[expected] += correct
    rest = [a for a in MANIPULATIONS if a != expected]
    for a in rest:
        p[a] += other / len(rest)
    return p


def collect_teacher_data(env_config: EnvConfig, episodes: int, seed: int,
                         policy: MoEPolicy) -> tuple[np.ndarray, np.ndarray, dict]:
    """Roll out the teacher; returns (token ids, target distributions, stats)."""
    rng = np.random.default_rng([seed, 101])
    env = PhasedGridWorld(env_config)
    ids, targets = [], []
    wins = {"simple": [], "complex": []}
    for _ in range(episodes):
        obs, goal = env.reset(int(rng.integers(2**31)), fault_seed=int(rng.integers(2**31)))
        prev = policy.null_action
        while not env.done:
            p = scripted_distribution(env)
            ids.append(policy.token_ids(obs.tokens, np.array(goal.tokens), prev)[0])
            targets.append(p)
            a = int(rng.choice(N_ACTIONS, p=p))
            res = env.step(a)
            obs, prev = res.observation, a
        wins["simple" if env.category in SIMPLE else "complex"].append(float(env.success))
    stats = {k: float(np.mean(v)) if v else float("nan") for k, v in wins.items()}
    return np.stack(ids), np.stack(targets), stats


def pretrain_backbone(policy: MoEPolicy, env_config: EnvConfig, seed: int,
                      episodes: int = 200, updates: int = 300, batch: int = 128,
                      lr: float = 3e-3) -> dict:
    """Fit the backbone to the teacher by soft-target cross-entropy, then freeze it."""
    ids, targets, stats = collect_teacher_data(env_config, episodes, seed, policy)
    rng = np.random.default_rng([seed, 102])
    policy.unfreeze_backbone()
    params = list(policy.backbone.values())
    opt = Adam(params, lr=lr)
    loss_v = float("nan")
    for _ in range(updates):
        idx = rng.choice(len(ids), size=min(batch, len(ids)), replace=False)
        logp = ad.log_softmax(policy.expert_logits(ids[idx], None), axis=-1)
        loss = ad.neg(ad.mean(ad.sum(ad.mul(logp, targets[idx]), axis=-1)))
        ad.backward(loss, leaves=params)
        clip_grad_norm(params, 1.0)
        opt.step()
        loss_v = loss.item()
    policy.freeze_backbone()
    with ad.no_grad():
        probs = ad.softmax(policy.expert_logits(ids[:2000], None), axis=-1).values
    t = targets[:2000]
    entropy_t = float(-(t * np.log(t)).sum(-1).mean())
    stats.update(final_loss=loss_v, teacher_entropy=entropy_t, n_states=int(len(ids)),
                 tv_to_teacher=float(0.5 * np.abs(probs - t).sum(-1).mean()))
    log.info("backbone warm-up: %s", stats)
    return stats


@functools.lru_cache(maxsize=8)
def _cached_state(env_json: str, policy_json: str, seed: int, episodes: int,
                  updates: int) -> tuple[dict, dict]:
    env_cfg = EnvConfig(**json.loads(env_json))
    pol_cfg = PolicyConfig(**json.loads(policy_json))
    env = PhasedGridWorld(env_cfg)
    policy = MoEPolicy(env.obs_vocab, env.goal_vocab, env.n_actions, pol_cfg, seed=seed)
    stats = pretrain_backbone(policy, env_cfg, seed, episodes, updates)
    return {k: v.values.copy() for k, v in policy.backbone.items()}, stats


def warm_backbone_state(env_config: EnvConfig, policy_config: PolicyConfig, seed: int,
                        episodes: int = 200, updates: int = 300) -> tuple[dict, dict]:
    """Warm backbone weights for (env, width, seed); memoized per process.

    Only backbone-shaping fields enter the key, so arms that differ in K or
    rank share one backbone per seed.
    """
    env_json = json.dumps({"grid_size": env_config.grid_size, "max_steps": env_config.max_steps,
                           "p_fault": env_config.p_fault,
                           "category_mix": dict(sorted(env_config.category_mix.items())),
                           "sight_radius": env_config.sight_radius,
                           "n_distractors": env_config.n_distractors}, sort_keys=True)
    pol_json = json.dumps({"d_model": policy_config.d_model, "n_blocks": policy_config.n_blocks,
                           "ffn_mult": policy_config.ffn_mult, "K": 1}, sort_keys=True)
    state, stats = _cached_state(env_json, pol_json, int(seed), int(episodes), int(updates))
    return {k: v.copy() for k, v in state.items()}, dict(stats)

