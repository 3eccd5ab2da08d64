"""Frozen transformer-style backbone with K low-rank expert adapters.

The backbone reads one token per observation slot, goal slot and the
previous action. Expert ``k`` replaces the query and value projections
``W`` of every block with ``W + B_k A_k``; nothing else is adapted.
"""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "PolicyConfig", "MoEPolicy", "BaseEncoding", "sample_action", "policy_entropy",
    "sample_actions", "save_checkpoint", "load_checkpoint", "policy_state",
    "load_policy_state", "ADAPTED_PROJECTIONS",
]

ADAPTED_PROJECTIONS = ("q_proj", "v_proj")


@dataclasses.dataclass
class PolicyConfig:
    K: int = 4
    rank: int = 8
    d_model: int = 64
    n_blocks: int = 2
    ffn_mult: int = 2
    lora_init_std: float = 0.02

    def validate(self) -> None:
        if self.K < 1:
            raise ValueError("a policy needs at least one expert adapter")
        if self.rank < 1 or self.d_model < 1 or self.n_blocks < 1:
            raise ValueError("rank, d_model and n_blocks must be positive")


@dataclasses.dataclass
class BaseEncoding:
    """Frozen-backbone summaries of a batch of steps (no adapters)."""
    obs: np.ndarray      # [N, d] mean over observation slots
    goal: np.ndarray     # [N, d] mean over goal slots
    pooled: np.ndarray   # [N, d] mean over all slots (critic / token-router input)
    logits: np.ndarray   # [N, A] backbone action logits


class MoEPolicy:
    """Backbone parameters, K LoRA experts and a shared critic head.

    ``obs_vocab``/``goal_vocab`` list the vocabulary size of each token slot.
    """

    def __init__(self, obs_vocab: Sequence[int], goal_vocab: Sequence[int], n_actions: int,
                 config: PolicyConfig | None = None, seed: int = 0):
        self.config = config or PolicyConfig()
        self.config.validate()
        self.obs_vocab = tuple(obs_vocab)
        self.goal_vocab = tuple(goal_vocab)
        self.n_actions = n_actions
        self.slot_vocab = self.obs_vocab + self.goal_vocab + (n_actions + 1,)
        self.n_obs = len(self.obs_vocab)
        self.n_goal = len(self.goal_vocab)
        self.n_slots = len(self.slot_vocab)
        self.offsets = np.concatenate([[0], np.cumsum(self.slot_vocab)[:-1]]).astype(np.int64)
        self.null_action = n_actions
        rng = np.random.default_rng([seed, 11])
        self.backbone = self._init_backbone(rng)
        self.experts = [self._init_expert(k, rng) for k in range(self.config.K)]
        self.value_head = {"value.w": ad.parameter(np.zeros(self.config.d_model), "value.w"),
                           "value.b": ad.parameter(np.zeros(()), "value.b")}
        self.freeze_backbone()

    # -- parameters -------------------------------------------------------
    def _init_backbone(self, rng) -> dict[str, Tensor]:
        d = self.config.d_model
        h = d * self.config.ffn_mult
        p: dict[str, np.ndarray] = {
            "embed.tok": rng.normal(0, 0.5, (int(sum(self.slot_vocab)), d)),
            "embed.pos": rng.normal(0, 0.1, (self.n_slots, d)),
        }
        for b in range(self.config.n_blocks):
            for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
                p[f"block{b}.attn.{name}"] = rng.normal(0, 1 / math.sqrt(d), (d, d))
            p[f"block{b}.ln1.g"] = np.ones(d)
            p[f"block{b}.ln1.b"] = np.zeros(d)
            p[f"block{b}.ln2.g"] = np.ones(d)
            p[f"block{b}.ln2.b"] = np.zeros(d)
            p[f"block{b}.ffn.w1"] = rng.normal(0, 1 / math.sqrt(d), (d, h))
            p[f"block{b}.ffn.b1"] = np.zeros(h)
            p[f"block{b}.ffn.w2"] = rng.normal(0, 1 / math.sqrt(h), (h, d))
            p[f"block{b}.ffn.b2"] = np.zeros(d)
        p["ln_f.g"] = np.ones(d)
        p["ln_f.b"] = np.zeros(d)
        p["head.w"] = rng.normal(0, 1 / math.sqrt(d), (d, self.n_actions))
        p["head.b"] = np.zeros(self.n_actions)
        return {k: ad.parameter(v, k) for k, v in p.items()}

    def _init_expert(self, k: int, rng) -> dict[str, Tensor]:
        d, r = self.config.d_model, self.config.rank
        out = {}
        for b in range(self.config.n_blocks):
            for proj in ADAPTED_PROJECTIONS:
                base = f"expert{k}.block{b}.{proj}"
                out[f"{base}.B"] = ad.parameter(np.zeros((d, r)), f"{base}.B")
                out[f"{base}.A"] = ad.parameter(rng.normal(0, self.config.lora_init_std, (r, d)),
                                                f"{base}.A")
        return out

    def freeze_backbone(self) -> None:
        for t in self.backbone.values():
            t.requires_grad = False

    def unfreeze_backbone(self) -> None:
        for t in self.backbone.values():
            t.requires_grad = True

    def expert_params(self, k: int | None = None) -> list[Tensor]:
        if k is not None:
            return list(self.experts[k].values())
        return [t for e in self.experts for t in e.values()]

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.backbone)
        for e in self.experts:
            out.update(e)
        out.update(self.value_head)
        return out

    def adapted_projections(self) -> set[tuple[str, str]]:
        """(block, projection) pairs that carry an adapter in any expert."""
        out = set()
        for e in self.experts:
            for name in e:
                _, block, proj, _ = name.split(".")
                out.add((block, proj))
        return out

    # -- forward ----------------------------------------------------------
    def token_ids(self, obs_tokens: np.ndarray, goal_tokens: np.ndarray,
                  prev_action: np.ndarray) -> np.ndarray:
        """Stack per-step slot tokens into global vocabulary ids, shape [N, S]."""
        obs_tokens = np.atleast_2d(obs_tokens)
        goal_tokens = np.atleast_2d(goal_tokens)
        prev_action = np.atleast_1d(prev_action).reshape(-1, 1)
        raw = np.concatenate([obs_tokens, goal_tokens, prev_action], axis=1)
        return raw + self.offsets

    def hidden(self, ids: np.ndarray, expert: int | None = None) -> Tensor:
        """Final-layer hidden states [N, S, d]; adapter ``expert`` applied if given."""
        bb = self.backbone
        d = self.config.d_model
        lora = self.experts[expert] if expert is not None else None
        x = ad.add(ad.take(bb["embed.tok"], ids), bb["embed.pos"])
        scale = 1.0 / math.sqrt(d)
        for b in range(self.config.n_blocks):
            pre = f"block{b}"
            h = ad.layer_norm(x, bb[f"{pre}.ln1.g"], bb[f"{pre}.ln1.b"])
            q = ad.matmul(h, bb[f"{pre}.attn.q_proj"])
            k = ad.matmul(h, bb[f"{pre}.attn.k_proj"])
            v = ad.matmul(h, bb[f"{pre}.attn.v_proj"])
            if lora is not None:
                e = f"expert{expert}.{pre}"
                q = ad.add(q, ad.matmul(ad.matmul(h, lora[f"{e}.q_proj.B"]), lora[f"{e}.q_proj.A"]))
                v = ad.add(v, ad.matmul(ad.matmul(h, lora[f"{e}.v_proj.B"]), lora[f"{e}.v_proj.A"]))
            att = ad.softmax(ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale), axis=-1)
            x = ad.add(x, ad.matmul(ad.matmul(att, v), bb[f"{pre}.attn.o_proj"]))
            h2 = ad.layer_norm(x, bb[f"{pre}.ln2.g"], bb[f"{pre}.ln2.b"])
            f = ad.relu(ad.add(ad.matmul(h2, bb[f"{pre}.ffn.w1"]), bb[f"{pre}.ffn.b1"]))
            x = ad.add(x, ad.add(ad.matmul(f, bb[f"{pre}.ffn.w2"]), bb[f"{pre}.ffn.b2"]))
        return ad.layer_norm(x, bb["ln_f.g"], bb["ln_f.b"])

    def logits_from_hidden(self, hid: Tensor) -> Tensor:
        pooled = ad.mean(hid, axis=-2)
        return ad.add(ad.matmul(pooled, self.backbone["head.w"]), self.backbone["head.b"])

    def expert_logits(self, ids: np.ndarray, k: int | None) -> Tensor:
        """Action logits [N, A] under expert ``k`` (``None`` = bare backbone)."""
        if k is not None and not 0 <= k < self.config.K:
            raise IndexError(f"expert index {k} out of range for K={self.config.K}")
        return self.logits_from_hidden(self.hidden(ids, k))

    def expert_forward(self, k: int, ids: np.ndarray) -> Tensor:
        """Action distribution [N, A] of expert ``k``; only its adapter enters the graph."""
        return ad.softmax(self.expert_logits(ids, k), axis=-1)

    def encode(self, ids: np.ndarray) -> BaseEncoding:
        """Frozen-backbone encodings used by routers and the critic."""
        with ad.no_grad():
            hid = self.hidden(ids, None).values
        n_o, n_g = self.n_obs, self.n_goal
        pooled = hid.mean(axis=-2)
        logits = pooled @ self.backbone["head.w"].values + self.backbone["head.b"].values
        return BaseEncoding(obs=hid[:, :n_o].mean(axis=1), goal=hid[:, n_o:n_o + n_g].mean(axis=1),
                            pooled=pooled, logits=logits)

    def value(self, pooled: np.ndarray) -> Tensor:
        return ad.add(ad.matmul(pooled, self.value_head["value.w"]), self.value_head["value.b"])


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Categorical draw from one distribution; returns (action, log-prob)."""
    probs = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    a = int(np.searchsorted(cdf, u, side="right"))
    a = min(a, len(probs) - 1)
    return a, float(np.log(probs[a]))


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized categorical draws, one per row."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    a = (cdf <= u).sum(axis=-1)
    return np.minimum(a, probs.shape[-1] - 1)


def policy_entropy(probs, axis: int = -1) -> np.ndarray | float:
    """Shannon entropy in bits."""
    p = np.asarray(probs, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    h = -(p * np.log2(safe)).sum(axis=axis)
    return float(h) if np.ndim(h) == 0 else h


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"PAMOE-CKPT 1\n"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray | Tensor]) -> None:
    """Write named float64 tensors.

    Layout: magic line, then per tensor an ASCII header
    ``<name> <ndim> <dim0> ... <dimN>\\n`` followed by the raw little-endian
    float64 payload in C order.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for name in sorted(tensors):
            v = tensors[name]
            arr = np.asarray(v.values if isinstance(v, Tensor) else v, dtype="<f8", order="C")
            if " " in name or "\n" in name:
                raise ValueError(f"tensor name {name!r} may not contain whitespace")
            header = " ".join([name, str(arr.ndim), *map(str, arr.shape)]) + "\n"
            fh.write(header.encode())
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        while True:
            line = fh.readline()
            if not line:
                break
            parts = line.decode().split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(x) for x in parts[2:2 + ndim])
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = arr.astype(np.float64)
    return out


def policy_state(policy: MoEPolicy) -> dict[str, np.ndarray]:
    return {k: v.values.copy() for k, v in policy.named_parameters().items()}


def load_policy_state(policy: MoEPolicy, state: dict[str, np.ndarray]) -> None:
    params = policy.named_parameters()
    missing = set(params) - set(state)
    if missing:
        raise KeyError(f"checkpoint lacks {sorted(missing)[:3]}...")
    for k, t in params.items():
        if t.values.shape != state[k].shape:
            raise ValueError(f"shape mismatch for {k}: {t.values.shape} vs {state[k].shape}")
        t.values[...] = state[k]
