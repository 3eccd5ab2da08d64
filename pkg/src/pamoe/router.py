"""Phase router, temperature schedule, switching penalty and straight-through selection.

The router maps (observation, goal, recent history) to a distribution over
K experts and picks the argmax. Forward pass per step:

1. ``o_emb``/``g_emb``: frozen-backbone mean-pooled encodings.
2. ``o_align = o_emb + CrossAttn(q=o_emb, k=g_emb, v=g_emb) W_o``.
3. ``h_enc``: 3-layer LSTM over the last L (action, observation) pairs,
   left-padded with a learned null entry.
4. ``p = softmax(MLP([o_align; h_enc]) / tau)``, ``z = argmax p``.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, Tensor

__all__ = [
    "RouterConfig", "RouterParams", "RouterState", "RouterOutput", "AnnealSchedule",
    "PhaseRouter", "anneal_temperature", "switching_penalty", "straight_through_select",
    "count_switches", "argmax_lowest",
]


@dataclasses.dataclass
class RouterConfig:
    K: int = 4
    L: int = 5
    d: int = 64
    n_layers: int = 3
    action_dim: int = 16
    mlp_hidden: int = 64
    use_history: bool = True
    use_goal_attention: bool = True

    def validate(self) -> None:
        if self.K < 1 or self.L < 1 or self.d < 1 or self.n_layers < 1:
            raise ValueError("router sizes must be positive")


@dataclasses.dataclass
class AnnealSchedule:
    tau0: float = 2.0
    tauf: float = 0.5
    T_anneal: int = 3000

    def __call__(self, t: int) -> float:
        return anneal_temperature(self, t)


def anneal_temperature(sched: AnnealSchedule, t: int) -> float:
    """Linear decay from ``tau0`` to ``tauf`` over ``T_anneal`` steps, then flat."""
    if t < 0:
        raise DomainError("schedule step must be nonnegative")
    return max(sched.tauf, sched.tau0 - (sched.tau0 - sched.tauf) * t / sched.T_anneal)


def argmax_lowest(p: np.ndarray, axis: int = -1) -> np.ndarray | int:
    """Argmax with ties broken toward the lowest index (numpy's rule)."""
    out = np.argmax(p, axis=axis)
    return int(out) if np.ndim(out) == 0 else out


@dataclasses.dataclass
class RouterOutput:
    p: np.ndarray
    z: int
    tau_used: float


class RouterParams:
    """Trainable router weights. Disjoint from the backbone and every adapter."""

    def __init__(self, config: RouterConfig, d_model: int, n_actions: int, seed: int = 0):
        config.validate()
        self.config = config
        self.d_model = d_model
        self.n_actions = n_actions
        rng = np.random.default_rng([seed, 23])
        dm, d, a = d_model, config.d, config.action_dim
        s = 1.0 / math.sqrt(dm)
        p = {
            "attn.q": rng.normal(0, s, (dm, dm)),
            "attn.k": rng.normal(0, s, (dm, dm)),
            "attn.v": rng.normal(0, s, (dm, dm)),
            "attn.o": rng.normal(0, s, (dm, dm)),
            # last row is the "no action yet" id
            "hist.action_table": rng.normal(0, 0.5, (n_actions + 1, a)),
            "hist.null": rng.normal(0, 0.1, (a + dm,)),
        }
        in_dim = a + dm
        for layer in range(config.n_layers):
            width = in_dim if layer == 0 else d
            p[f"lstm{layer}.w_x"] = rng.normal(0, 1 / math.sqrt(width), (width, 4 * d))
            p[f"lstm{layer}.w_h"] = rng.normal(0, 1 / math.sqrt(d), (d, 4 * d))
            bias = np.zeros(4 * d)
            bias[d:2 * d] = 1.0  # forget-gate bias
            p[f"lstm{layer}.b"] = bias
        h = config.mlp_hidden
        p["mlp.w1"] = rng.normal(0, 1 / math.sqrt(dm + d), (dm + d, h))
        p["mlp.b1"] = np.zeros(h)
        p["mlp.w2"] = rng.normal(0, 1 / math.sqrt(h), (h, config.K))
        p["mlp.b2"] = np.zeros(config.K)
        self.tensors = {k: ad.parameter(v, f"router.{k}") for k, v in p.items()}

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def named(self) -> dict[str, Tensor]:
        return {f"router.{k}": v for k, v in self.tensors.items()}

    def lstm_layers(self):
        return [(self[f"lstm{i}.w_x"], self[f"lstm{i}.w_h"], self[f"lstm{i}.b"])
                for i in range(self.config.n_layers)]


class RouterState:
    """Per-episode history window of (previous action, previous observation) pairs.

    Entries are kept oldest-first; ``record`` is called after the action of a
    step is known, so routing at step t sees pairs from steps t-L..t-1.
    """

    def __init__(self, L: int, d_model: int, n_actions: int):
        self.L = L
        self.d_model = d_model
        self.null_action = n_actions
        self.reset()

    def reset(self) -> None:
        self.actions: list[int] = []
        self.obs: list[np.ndarray] = []
        self.initialized = True

    def record(self, action: int, obs_emb: np.ndarray) -> None:
        self.actions.append(int(action))
        self.obs.append(np.asarray(obs_emb, dtype=np.float64))
        if len(self.actions) > self.L:
            self.actions.pop(0)
            self.obs.pop(0)

    def window(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Left-padded arrays: actions [L], observations [L, d], filled mask [L]."""
        n = len(self.actions)
        acts = np.full(self.L, self.null_action, dtype=np.int64)
        obs = np.zeros((self.L, self.d_model))
        mask = np.zeros(self.L, dtype=bool)
        if n:
            acts[self.L - n:] = self.actions
            obs[self.L - n:] = np.stack(self.obs)
            mask[self.L - n:] = True
        return acts, obs, mask

    def __len__(self) -> int:
        return len(self.actions)


class PhaseRouter:
    """Router network plus the bookkeeping needed for online routing."""

    def __init__(self, params: RouterParams):
        self.params = params
        self.config = params.config

    def logits(self, o_emb, g_emb, hist_actions, hist_obs, hist_mask) -> Tensor:
        """Batched router logits [N, K] before temperature."""
        P = self.params
        cfg = self.config
        o_emb = ad.tensor(o_emb)
        g_emb = ad.tensor(g_emb)
        n = o_emb.shape[0]
        if cfg.use_goal_attention:
            q = ad.matmul(o_emb, P["attn.q"])
            k = ad.matmul(g_emb, P["attn.k"])
            v = ad.matmul(g_emb, P["attn.v"])
            att = ad.cross_attention(q, k, v)
            o_align = ad.add(o_emb, ad.matmul(att, P["attn.o"]))
        else:
            o_align = o_emb
        if cfg.use_history:
            emb = ad.concat([ad.take(P["hist.action_table"], hist_actions),
                             ad.tensor(hist_obs)], axis=-1)          # [N, L, a+dm]
            m = np.asarray(hist_mask, dtype=np.float64)[..., None]
            emb = ad.add(ad.mul(emb, m), ad.mul(P["hist.null"], 1.0 - m))
            xs = [emb[:, i, :] for i in range(emb.shape[1])]
            h_enc, _ = ad.lstm(xs, P.lstm_layers())
        else:
            h_enc = ad.tensor(np.zeros((n, cfg.d)))
        hid = ad.relu(ad.add(ad.matmul(ad.concat([o_align, h_enc], axis=-1), P["mlp.w1"]),
                             P["mlp.b1"]))
        return ad.add(ad.matmul(hid, P["mlp.w2"]), P["mlp.b2"])

    def probs(self, o_emb, g_emb, hist_actions, hist_obs, hist_mask, tau) -> Tensor:
        """Expert distribution [N, K]; ``tau`` may be a scalar or per-row array."""
        logits = self.logits(o_emb, g_emb, hist_actions, hist_obs, hist_mask)
        tau = np.asarray(tau, dtype=np.float64)
        if np.any(tau <= 0):
            raise DomainError("router temperature must be positive")
        if tau.ndim == 0:
            return ad.softmax_temperature(logits, float(tau))
        return ad.softmax(ad.div(logits, tau.reshape(-1, 1)), axis=-1)

    def route(self, state: RouterState, o_emb: np.ndarray, g_emb: np.ndarray,
              tau: float) -> RouterOutput:
        """Route one step of one episode (no graph is recorded)."""
        if state is None or not getattr(state, "initialized", False):
            raise RuntimeError("router state is not initialized; call reset() first")
        if not tau > 0:
            raise DomainError("router temperature must be positive")
        acts, obs, mask = state.window()
        with ad.no_grad():
            p = self.probs(np.atleast_2d(o_emb), np.atleast_2d(g_emb), acts[None],
                           obs[None], mask[None], tau).values[0]
        return RouterOutput(p=p, z=argmax_lowest(p), tau_used=float(tau))


# ---------------------------------------------------------------- temporal consistency

def count_switches(z: Sequence[int]) -> int:
    """Number of t with z_t != z_{t+1}."""
    z = np.asarray(z)
    if z.size == 0:
        raise DomainError("switch count of an empty sequence")
    return int(np.count_nonzero(z[1:] != z[:-1]))


def switching_penalty(p: Tensor | np.ndarray, lambda_s: float = 0.05,
                      z: Sequence[int] | None = None, detach_next: bool = True) -> Tensor:
    """Hard switch rate in the forward pass, soft-disagreement gradient in the backward.

    ``p`` is the [T, K] routing distribution of one episode. The forward value
    is ``lambda_s/(T-1) * sum_t 1[z_t != z_{t+1}]``. The backward pass
    differentiates ``lambda_s/(T-1) * sum_t (1 - <p_t, p_{t+1}>)``.

    With ``detach_next`` (default) each pair treats ``p_{t+1}`` as a fixed
    target, so ``dL/dp_t = -lambda_s/(T-1) * p_{t+1}`` exactly and the last
    step receives no gradient. ``detach_next=False`` differentiates both
    sides of every pair.
    """
    p = p if isinstance(p, Tensor) else ad.tensor(p)
    T = p.shape[0]
    if T == 0:
        raise DomainError("switching penalty of an empty trajectory")
    if T == 1:
        return ad.tensor(0.0)
    if z is None:
        z = argmax_lowest(p.values, axis=-1)
    coef = lambda_s / (T - 1)
    hard = coef * count_switches(z)
    nxt = ad.detach(p[1:]) if detach_next else p[1:]
    overlap = ad.sum(ad.mul(p[:-1], nxt))
    soft = ad.mul(ad.sub(float(T - 1), overlap), coef)
    return ad.straight_through(np.asarray(hard), soft)


def straight_through_select(p: Tensor, z: np.ndarray | int | None = None) -> tuple[np.ndarray, Tensor]:
    """Hard argmax selection whose weight carries the gradient of ``p[z]``.

    Returns ``(z, w)`` where ``w`` is exactly 1.0 in the forward pass and
    ``dw/dp = onehot(z)`` in the backward pass. ``p`` may be [K] or [N, K].
    A recorded ``z`` (from the rollout) can be passed in.
    """
    pv = p.values
    if z is None:
        z = argmax_lowest(pv, axis=-1)
    z_arr = np.asarray(z)
    if pv.ndim == 1:
        chosen = p[int(z_arr)]
    else:
        chosen = p[np.arange(pv.shape[0]), z_arr]
    return z_arr if z_arr.ndim else int(z_arr), ad.straight_through(np.ones(chosen.shape), chosen)
