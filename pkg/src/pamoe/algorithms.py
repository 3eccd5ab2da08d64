"""Advantage estimators, the clipped surrogate and the two routing regularizers."""
from __future__ import annotations

import collections
import dataclasses
import logging
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor

__all__ = [
    "TrajectoryGroup", "AdvantageEstimate", "ExpertBuffer", "LossBreakdown",
    "gae_advantages", "rloo_advantages", "grpo_advantages", "gigpo_group_advantages",
    "discounted_returns_to_go", "surrogate_terms", "clipped_surrogate",
    "diversity_loss", "balance_loss", "mean_pairwise_kl",
]

log = logging.getLogger(__name__)

STD_EPS = 1e-8


@dataclasses.dataclass
class TrajectoryGroup:
    """n trajectories rolled out from one initial state.

    ``rewards[i]`` is the per-step reward array of trajectory i and
    ``fingerprints[i]`` (optional) the per-step anchor-state keys.
    """
    rewards: list[np.ndarray]
    fingerprints: list[list] | None = None

    @property
    def returns(self) -> np.ndarray:
        return np.array([float(np.sum(r)) for r in self.rewards])

    @property
    def lengths(self) -> list[int]:
        return [len(r) for r in self.rewards]

    def broadcast(self, per_traj: np.ndarray) -> list[np.ndarray]:
        return [np.full(n, float(a)) for n, a in zip(self.lengths, per_traj)]


@dataclasses.dataclass
class AdvantageEstimate:
    values: list[np.ndarray]     # per-trajectory per-step advantages
    estimator: str

    def flat(self) -> np.ndarray:
        return np.concatenate(self.values) if self.values else np.zeros(0)


def _returns_of(group) -> np.ndarray:
    if isinstance(group, TrajectoryGroup):
        return group.returns
    return np.asarray(group, dtype=np.float64)


# ---------------------------------------------------------------- estimators

def gae_advantages(rewards, values, gamma: float = 0.99, lam: float = 0.95) -> np.ndarray:
    """Generalized advantage estimates by reverse recursion.

    ``values`` carries one extra bootstrap entry (length T+1).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (rewards.shape[0] + 1,):
        raise ShapeError(f"values must have length T+1={rewards.shape[0] + 1}, got {values.shape}")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise DomainError("gamma and lam must lie in [0, 1]")
    T = rewards.shape[0]
    adv = np.zeros(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv


def rloo_advantages(group) -> np.ndarray:
    """Leave-one-out baseline: A_i = R_i - mean_{j != i} R_j (per trajectory)."""
    R = _returns_of(group)
    n = R.shape[0]
    if n < 2:
        raise DomainError("leave-one-out needs at least two trajectories")
    return R - (R.sum() - R) / (n - 1)


def grpo_advantages(group, standardize: bool = True) -> np.ndarray:
    """Group-relative advantages (R_i - mean R) / (std R + 1e-8), population std.

    With ``standardize=False`` only the group mean is subtracted.
    """
    R = _returns_of(group)
    if R.shape[0] < 2:
        raise DomainError("group-relative advantages need at least two trajectories")
    centered = R - R.mean()
    if not standardize:
        return centered
    return centered / (R.std() + STD_EPS)


def discounted_returns_to_go(rewards, gamma: float = 1.0) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def gigpo_group_advantages(group: TrajectoryGroup, anchor_states: Sequence[Sequence] | None = None,
                           standardize: bool = True, step_gamma: float = 0.95) -> AdvantageEstimate:
    """Two-level group advantage: episode level plus anchor-state level.

    Episode level is the group-relative return. Steps across the group that
    share an anchor-state key form a cluster; inside a cluster of two or more
    steps each step gets its group-relative discounted return-to-go. A step's
    advantage is the mean of both levels when it has a cluster value, and the
    episode-level value otherwise.
    """
    anchors = anchor_states if anchor_states is not None else group.fingerprints
    if anchors is None:
        raise ValueError("anchor states are required for the step-level advantage")
    episode = grpo_advantages(group, standardize) if len(group.rewards) >= 2 \
        else np.zeros(len(group.rewards))
    rtg = [discounted_returns_to_go(r, step_gamma) for r in group.rewards]
    clusters: dict = collections.defaultdict(list)
    for i, keys in enumerate(anchors):
        if len(keys) != len(group.rewards[i]):
            raise ShapeError(f"trajectory {i}: {len(keys)} anchors for {len(group.rewards[i])} steps")
        for t, key in enumerate(keys):
            clusters[key].append((i, t))
    out = [np.full(len(r), episode[i]) for i, r in enumerate(group.rewards)]
    for members in clusters.values():
        if len(members) < 2:
            continue
        vals = np.array([rtg[i][t] for i, t in members])
        centered = vals - vals.mean()
        step_adv = centered / (vals.std() + STD_EPS) if standardize else centered
        for (i, t), s in zip(members, step_adv):
            out[i][t] = 0.5 * (episode[i] + s)
    return AdvantageEstimate(out, "gigpo")


# ---------------------------------------------------------------- surrogate

def surrogate_terms(logprob_new: Tensor, logprob_old, advantages, epsilon: float = 0.2) -> Tensor:
    """Per-step min(rho*A, clip(rho, 1-eps, 1+eps)*A) with rho = exp(new - old)."""
    old = np.asarray(logprob_old, dtype=np.float64)
    A = np.asarray(advantages, dtype=np.float64)
    if logprob_new.shape != old.shape or old.shape != A.shape:
        raise ShapeError("log-probs and advantages must have equal lengths")
    ratio = ad.exp(ad.sub(logprob_new, old))
    unclipped = ad.mul(ratio, A)
    clipped = ad.mul(ad.clip(ratio, 1.0 - epsilon, 1.0 + epsilon), A)
    return ad.minimum(unclipped, clipped)


def clipped_surrogate(logprob_new: Tensor, logprob_old, advantages, epsilon: float = 0.2) -> Tensor:
    """Clipped surrogate returned as a loss, i.e. the negated mean objective."""
    return ad.neg(ad.mean(surrogate_terms(ad.tensor(logprob_new) if not isinstance(logprob_new, Tensor)
                                          else logprob_new, logprob_old, advantages, epsilon)))


# ---------------------------------------------------------------- regularizers

def balance_loss(f, K: int | None = None) -> Tensor:
    """Squared deviation of expert usage frequencies from uniform."""
    f = f if isinstance(f, Tensor) else ad.tensor(f)
    K = f.shape[-1] if K is None else K
    if abs(float(f.values.sum()) - 1.0) > 1e-6:
        raise DomainError(f"frequencies must sum to 1, got {f.values.sum()}")
    dev = ad.sub(f, 1.0 / K)
    return ad.sum(ad.mul(dev, dev))


def diversity_loss(expert_probs: Sequence[Tensor], tau_div: float = 0.1) -> Tensor:
    """Hinge on pairwise KL over ordered expert pairs, averaged over states.

    ``expert_probs[k]`` is expert k's action distribution on the sampled
    states, shape [M, A].
    """
    K = len(expert_probs)
    total = ad.tensor(0.0)
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            kl = ad.kl_divergence(expert_probs[i], expert_probs[j], check=False)
            total = ad.add(total, ad.mean(ad.relu(ad.sub(tau_div, kl))))
    return total


def mean_pairwise_kl(expert_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Per-state mean KL over ordered expert pairs (numpy, for reporting)."""
    K = len(expert_probs)
    rows = []
    for i in range(K):
        for j in range(K):
            if i != j:
                with ad.no_grad():
                    rows.append(ad.kl_divergence(expert_probs[i], expert_probs[j],
                                                 check=False).values)
    return np.mean(rows, axis=0) if rows else np.zeros(len(expert_probs[0]))


class ExpertBuffer:
    """FIFO store of (state ids, cached logits) per expert."""

    def __init__(self, K: int, capacity: int = 1000):
        self.capacity = capacity
        self.states = [collections.deque(maxlen=capacity) for _ in range(K)]
        self.logits = [collections.deque(maxlen=capacity) for _ in range(K)]

    def add(self, k: int, state_ids: np.ndarray, logits: np.ndarray) -> None:
        self.states[k].append(np.asarray(state_ids))
        self.logits[k].append(np.asarray(logits))

    def __len__(self) -> int:
        return sum(len(s) for s in self.states)

    def sizes(self) -> list[int]:
        return [len(s) for s in self.states]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Up to ``n`` distinct states drawn uniformly from all experts' entries."""
        pool = [s for dq in self.states for s in dq]
        if not pool:
            return np.zeros((0, 0), dtype=np.int64)
        if len(pool) < n:
            log.warning("expert buffer holds %d states, fewer than the %d requested", len(pool), n)
            idx = np.arange(len(pool))
        else:
            idx = np.sort(rng.choice(len(pool), size=n, replace=False))
        return np.stack([pool[i] for i in idx])


@dataclasses.dataclass
class LossBreakdown:
    l_rl: float
    l_div: float
    l_bal: float
    l_switch: float
    total: float
    alpha: float
    beta: float
    gamma: float
    l_value: float = 0.0
    grad_norm: float = 0.0

    def recomposed(self) -> float:
        return self.l_rl + self.alpha * self.l_div + self.beta * self.l_bal + self.gamma * self.l_switch
