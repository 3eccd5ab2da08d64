"""Comparison arms: token-level and trajectory-level routing, gradient surgery.

Token-level routing needs a token stream, which atomic grid actions do not
have. Each action is therefore emulated as ``m`` sub-decisions: micro-token
``i`` of a step has hidden state ``h_i = pooled + e_i`` with a fixed random
position vector ``e_i``, is routed on its own, and the step's action logits
are the mean of the chosen experts' logits over the ``m`` micro-tokens.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import Tensor
from .router import argmax_lowest

__all__ = [
    "TokenLevelRouter", "PhaseLossPartition", "route_token_level", "token_to_step_switches",
    "route_trajectory_level", "pcgrad_combine", "gradnorm_weights", "cagrad_combine",
    "cagrad_objective", "GradNormState",
]

log = logging.getLogger(__name__)


class TokenLevelRouter:
    """Per-micro-token MLP router ``softmax(MLP(h_i))`` over K experts."""

    def __init__(self, K: int, d_model: int, m: int = 8, hidden: int = 64, seed: int = 0,
                 position_std: float = 1.0):
        if m < 1:
            raise ValueError("need at least one micro-token per action")
        rng = np.random.default_rng([seed, 31])
        self.K, self.m = K, m
        # fixed, untrained micro-token position vectors
        self.positions = rng.normal(0, position_std, (m, d_model))
        self.tensors = {
            "w1": ad.parameter(rng.normal(0, 1 / math.sqrt(d_model), (d_model, hidden)), "token_router.w1"),
            "b1": ad.parameter(np.zeros(hidden), "token_router.b1"),
            "w2": ad.parameter(rng.normal(0, 1 / math.sqrt(hidden), (hidden, K)), "token_router.w2"),
            "b2": ad.parameter(np.zeros(K), "token_router.b2"),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def named(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.tensors.values()}

    def micro_hidden(self, pooled: np.ndarray) -> np.ndarray:
        """[N, d] step encodings to [N, m, d] micro-token hidden states."""
        return np.asarray(pooled)[:, None, :] + self.positions[None]

    def probs(self, hidden) -> Tensor:
        P = self.tensors
        h = ad.relu(ad.add(ad.matmul(hidden, P["w1"]), P["b1"]))
        return ad.softmax(ad.add(ad.matmul(h, P["w2"]), P["b2"]), axis=-1)


def route_token_level(router: TokenLevelRouter, hidden: np.ndarray, top: int = 1) -> np.ndarray:
    """Independent argmax (or top-2) per micro-token.

    ``hidden`` is [m, d] for one action or [N, m, d]; returns indices of
    shape [..., m] (top=1) or [..., m, 2] (top=2, best first).
    """
    with ad.no_grad():
        p = router.probs(np.asarray(hidden, dtype=np.float64)).values
    if top == 1:
        return argmax_lowest(p, axis=-1)
    # stable sort keeps the lowest index first among ties
    order = np.argsort(-p, axis=-1, kind="stable")
    return order[..., :top]


def token_to_step_switches(tokens_per_step: Sequence[Sequence[int]]) -> int:
    """Number of steps whose micro-tokens were not all routed to one expert."""
    count = 0
    for toks in tokens_per_step:
        # rows are micro-tokens; top-2 rows hold two indices each
        arr = np.asarray(toks)
        arr = arr.reshape(arr.shape[0], -1) if arr.size else arr
        if arr.size and np.any(arr != arr[0]):
            count += 1
    return count


def route_trajectory_level(router, o_emb: np.ndarray, g_emb: np.ndarray, tau: float = 1.0,
                           L: int = 5) -> int:
    """One routing decision at t=0 from the initial observation and goal.

    ``router`` is a :class:`~pamoe.router.PhaseRouter`; its history window is
    empty at t=0, so only the observation/goal path is used.
    """
    n_actions = router.params.n_actions
    acts = np.full((1, L), n_actions, dtype=np.int64)
    obs = np.zeros((1, L, np.asarray(o_emb).shape[-1]))
    mask = np.zeros((1, L), dtype=bool)
    with ad.no_grad():
        p = router.probs(np.atleast_2d(o_emb), np.atleast_2d(g_emb), acts, obs, mask, tau).values[0]
    return argmax_lowest(p)


# ---------------------------------------------------------------- gradient surgery

@dataclasses.dataclass
class PhaseLossPartition:
    """Per-phase loss accumulators; ``steps[phase]`` lists batch row indices."""
    steps: dict

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "PhaseLossPartition":
        out: dict = {}
        for i, lab in enumerate(labels):
            out.setdefault(int(lab), []).append(i)
        return cls({k: np.array(v) for k, v in sorted(out.items())})

    @property
    def phases(self) -> list[int]:
        return list(self.steps)


def pcgrad_combine(grads: Sequence[np.ndarray]) -> np.ndarray:
    """Project each gradient off every gradient it conflicts with, then sum.

    Projection order is fixed (ascending index) rather than random so runs
    are reproducible. Zero-norm partners are skipped.
    """
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(grads) == 1:
        return grads[0].copy()
    out = np.zeros_like(grads[0])
    for i, gi in enumerate(grads):
        g = gi.copy()
        for j, gj in enumerate(grads):
            if i == j:
                continue
            nn = float(gj @ gj)
            if nn == 0.0:
                continue
            dot = float(g @ gj)
            if dot < 0:
                g = g - dot / nn * gj
        out += g
    return out


@dataclasses.dataclass
class GradNormState:
    weights: np.ndarray
    initial_losses: np.ndarray


def gradnorm_weights(losses: Sequence[float], norms: Sequence[float], asymmetry: float = 1.5,
                     initial_losses: Sequence[float] | None = None,
                     weights: Sequence[float] | None = None, lr: float = 0.025) -> np.ndarray:
    """One GradNorm update of the per-phase loss weights.

    ``norms`` are the unweighted per-phase gradient norms. The weighted norm
    ``w_i G_i`` is pulled toward ``mean(w G) * r_i**asymmetry`` where ``r_i``
    is the phase's loss ratio ``L_i/L_i(0)`` relative to the mean ratio. The
    step is a subgradient step on ``sum_i |w_i G_i - target_i|`` with the
    target held fixed, scaled by ``1/mean(G)`` so it does not depend on the
    overall gradient magnitude; weights are clipped positive and renormalized to sum
    to the number of phases. Losses enter through their magnitudes.
    """
    L = np.abs(np.asarray(losses, dtype=np.float64))
    G = np.asarray(norms, dtype=np.float64)
    n = L.shape[0]
    if np.any(G <= 0):
        raise ValueError("gradient norms must be positive")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).copy()
    L0 = L if initial_losses is None else np.abs(np.asarray(initial_losses, dtype=np.float64))
    ratio = L / np.maximum(L0, 1e-12)
    rel = ratio / max(ratio.mean(), 1e-12)
    wg = w * G
    target = wg.mean() * rel ** asymmetry
    # gradient of the L1 gap w.r.t. w_i is sign(.) * G_i; normalized by mean G
    w = w - lr * np.sign(wg - target) * G / G.mean()
    w = np.maximum(w, 1e-6)
    return w * n / w.sum()


def cagrad_objective(w: np.ndarray, gram: np.ndarray, c: float) -> float:
    """``g_w . g_0 + c |g_0| |g_w|`` expressed through the Gram matrix."""
    n = gram.shape[0]
    g0_norm = math.sqrt(max(float(gram.sum()) / n ** 2, 0.0))
    gw_g0 = float(w @ gram.sum(axis=1)) / n
    gw_norm = math.sqrt(max(float(w @ gram @ w), 0.0))
    return gw_g0 + c * g0_norm * gw_norm


def cagrad_combine(grads: Sequence[np.ndarray], c: float = 0.5, rescale: str = "ball") -> np.ndarray:
    """Conflict-averse direction around the average gradient.

    Solves ``min_w g_w.g_0 + c|g_0||g_w|`` over simplex weights ``w``, then
    returns ``g_0 + c|g_0| g_w/|g_w|``. With ``rescale="ball"`` the result
    is divided by ``1 + c`` so identical inputs come back unchanged;
    ``"c2"`` divides by ``1 + c**2`` and ``"none"`` leaves it as is.
    """
    G = np.stack([np.asarray(g, dtype=np.float64) for g in grads])
    n = G.shape[0]
    g0 = G.mean(axis=0)
    if n == 1 or c == 0.0:
        return g0
    gram = G @ G.T
    scale = max(float(np.abs(gram).max()), 1e-300)
    gram_s = gram / scale
    res = minimize(cagrad_objective, np.full(n, 1.0 / n), args=(gram_s, c), method="SLSQP",
                   bounds=[(0.0, 1.0)] * n,
                   constraints=({"type": "eq", "fun": lambda w: w.sum() - 1.0},),
                   options={"ftol": 1e-14, "maxiter": 500})
    w = np.clip(res.x, 0.0, None)
    w = w / w.sum()
    gw = w @ G
    gw_norm = float(np.linalg.norm(gw))
    g0_norm = float(np.linalg.norm(g0))
    d = g0 if gw_norm == 0.0 else g0 + c * g0_norm * gw / gw_norm
    if rescale == "ball":
        return d / (1.0 + c)
    if rescale == "c2":
        return d / (1.0 + c * c)
    if rescale == "none":
        return d
    raise ValueError(f"unknown rescale mode {rescale!r}")
