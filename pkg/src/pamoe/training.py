"""Rollouts, advantage assembly and the combined routed-expert update.

One ``Trainer`` owns one arm of one seed: the policy (frozen backbone plus
adapters), whichever router the routing mode needs, the optimizer and the
expert buffer. ``train()`` alternates batched lockstep rollouts with one
epoch of minibatch updates and finishes with an evaluation pass.
"""
from __future__ import annotations

import dataclasses
import logging
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .algorithms import (ExpertBuffer, LossBreakdown, TrajectoryGroup, balance_loss,
                         diversity_loss, gae_advantages, gigpo_group_advantages,
                         grpo_advantages, mean_pairwise_kl, rloo_advantages, surrogate_terms)
from .baselines import (PhaseLossPartition, TokenLevelRouter, cagrad_combine, gradnorm_weights,
                        pcgrad_combine, token_to_step_switches)
from .config import ExperimentConfig
from .envs import CATEGORIES, CATEGORY_GROUP, N_ACTIONS, PHASES, PhasedGridWorld
from .metrics import (MetricsRecord, expert_activation_frequency, gradient_conflict_score,
                      parameter_occupancy, phase_alignment_overlap, phase_entropy_stats)
from .optim import Adam, clip_grad_norm
from .policy import MoEPolicy, policy_entropy, sample_actions
from .router import (AnnealSchedule, PhaseRouter, RouterParams, RouterState, argmax_lowest,
                     count_switches, switching_penalty)
from .warmup import warm_backbone_state

__all__ = [
    "STREAM_IDS", "stream", "NumericalAbort", "Trajectory", "StepBatch", "Agent", "Trainer",
    "EvalResult", "rollout", "compute_advantages",
]

log = logging.getLogger(__name__)

# named random sub-streams of one root seed
STREAM_IDS = {"env": 1, "policy-init": 2, "rollout": 3, "fault": 4, "eval": 5, "train": 6}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAM_IDS[name]])


class NumericalAbort(RuntimeError):
    """Non-finite loss or gradient; ``dump`` holds the diagnostic snapshot."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclasses.dataclass
class Trajectory:
    start: int
    stop: int
    group: int
    category: str
    success: bool
    ret: float

    @property
    def length(self) -> int:
        return self.stop - self.start


class StepBatch:
    """Flat per-step columns for a set of trajectories (rows ordered by trajectory, then t)."""

    def __init__(self, cols: dict[str, np.ndarray], fingerprints: list, trajectories: list[Trajectory]):
        self.cols = cols
        self.fingerprints = fingerprints
        self.trajectories = trajectories

    def __getattr__(self, name):
        cols = self.__dict__.get("cols")
        if cols is not None and name in cols:
            return cols[name]
        raise AttributeError(name)

    def __len__(self) -> int:
        return len(self.cols["action"])

    def rows_of(self, traj_ids: Sequence[int]) -> np.ndarray:
        parts = [np.arange(self.trajectories[i].start, self.trajectories[i].stop) for i in traj_ids]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def take(self, traj_ids: Sequence[int]) -> "StepBatch":
        rows = self.rows_of(traj_ids)
        cols = {k: v[rows] for k, v in self.cols.items()}
        fps = [self.fingerprints[i] for i in rows]
        trajs, pos = [], 0
        for i in traj_ids:
            tr = self.trajectories[i]
            trajs.append(dataclasses.replace(tr, start=pos, stop=pos + tr.length))
            pos += tr.length
        # re-point decision rows into the new row numbering
        if "decision" in cols:
            remap = np.full(len(self), -1, dtype=np.int64)
            remap[rows] = np.arange(len(rows))
            cols["decision"] = remap[cols["decision"]]
        return StepBatch(cols, fps, trajs)


class Agent:
    """Policy plus the router the routing mode needs."""

    def __init__(self, cfg: ExperimentConfig, seed: int, warm: bool = True):
        self.cfg = cfg
        self.mode = cfg.routing
        env = PhasedGridWorld(cfg.env)
        pcfg = dataclasses.replace(cfg.policy, K=cfg.n_adapters)
        init_seed = int(stream(seed, "policy-init").integers(2**31))
        self.policy = MoEPolicy(env.obs_vocab, env.goal_vocab, env.n_actions, pcfg, seed=init_seed)
        self.warmup_stats: dict = {}
        if warm:
            state, self.warmup_stats = warm_backbone_state(cfg.env, pcfg, seed,
                                                           cfg.training.warmup_episodes,
                                                           cfg.training.warmup_updates)
            for k, v in state.items():
                self.policy.backbone[k].values[...] = v
        self.K = pcfg.K
        self.L = cfg.router.L
        self.router = None
        self.token_router = None
        if self.mode in ("phase", "trajectory"):
            params = RouterParams(cfg.router.router_config(self.K), pcfg.d_model, N_ACTIONS,
                                  seed=init_seed)
            self.router = PhaseRouter(params)
        elif self.mode in ("token", "token_top2"):
            self.token_router = TokenLevelRouter(self.K, pcfg.d_model, cfg.router.token_m,
                                                 seed=init_seed)
        self.top = 2 if self.mode == "token_top2" else 1
        self.use_critic = cfg.algorithm.algorithm == "ppo"

    # -- parameters -------------------------------------------------------
    def router_parameters(self) -> list[ad.Tensor]:
        if self.router is not None:
            return self.router.params.parameters()
        if self.token_router is not None:
            return self.token_router.parameters()
        return []

    def trainable(self) -> list[ad.Tensor]:
        out = self.policy.expert_params() + self.router_parameters()
        if self.use_critic:
            out += list(self.policy.value_head.values())
        return out

    def named_state(self) -> dict[str, np.ndarray]:
        out = {k: v.values for k, v in self.policy.named_parameters().items()}
        if self.router is not None:
            out.update({k: v.values for k, v in self.router.params.named().items()})
        if self.token_router is not None:
            out.update({k: v.values for k, v in self.token_router.named().items()})
        return out

    # -- rollout-time routing (no graph) -----------------------------------
    def route(self, enc, hist_a, hist_o, hist_m, tau: float):
        n = enc.obs.shape[0]
        tok = np.zeros((n, 0), dtype=np.int64)
        with ad.no_grad():
            if self.mode == "phase":
                p = self.router.probs(enc.obs, enc.goal, hist_a, hist_o, hist_m, tau).values
            elif self.mode == "trajectory":
                empty = np.zeros_like(hist_m)
                p = self.router.probs(enc.obs, enc.goal, np.full_like(hist_a, N_ACTIONS), hist_o * 0.0,
                                      empty, tau).values
            elif self.mode in ("token", "token_top2"):
                p_tok = self.token_router.probs(self.token_router.micro_hidden(enc.pooled)).values
                if self.top == 1:
                    tok = argmax_lowest(p_tok, axis=-1)
                else:
                    tok = np.argsort(-p_tok, axis=-1, kind="stable")[..., :2]
                p = p_tok.mean(axis=1)
                first = tok.reshape(n, self.cfg.router.token_m, -1)[:, :, 0]
                z = np.array([np.bincount(r, minlength=self.K).argmax() for r in first])
                return p, z, tok
            else:
                p = np.ones((n, 1))
        return p, argmax_lowest(p, axis=-1), tok

    def token_weights(self, tok: np.ndarray) -> np.ndarray:
        """[N, K] share of each expert in a step's micro-token assignments."""
        n = tok.shape[0]
        flat = tok.reshape(n, -1)
        out = np.zeros((n, self.K))
        for k in range(self.K):
            out[:, k] = (flat == k).sum(axis=1)
        return out / flat.shape[1]

    def behaviour_logits(self, ids: np.ndarray, z: np.ndarray, tok: np.ndarray) -> np.ndarray:
        n = ids.shape[0]
        out = np.zeros((n, self.policy.n_actions))
        with ad.no_grad():
            if self.mode in ("token", "token_top2"):
                c = self.token_weights(tok)
                for k in range(self.K):
                    rows = np.flatnonzero(c[:, k] > 0)
                    if rows.size:
                        out[rows] += c[rows, k, None] * self.policy.expert_logits(ids[rows], k).values
                return out
            for k in np.unique(z):
                rows = np.flatnonzero(z == k)
                out[rows] = self.policy.expert_logits(ids[rows], int(k)).values
        return out


def rollout(agent: Agent, starts: Sequence[tuple[int, int, int]], rng: np.random.Generator,
            tau: float) -> StepBatch:
    """Run one episode per ``(env_seed, fault_seed, group)`` in lockstep."""
    cfg = agent.cfg
    pol = agent.policy
    B = len(starts)
    envs = [PhasedGridWorld(cfg.env) for _ in range(B)]
    obs, goals = [], []
    for env, (s, f, _) in zip(envs, starts):
        o, g = env.reset(int(s), fault_seed=int(f))
        obs.append(o.tokens)
        goals.append(np.array(g.tokens))
    d = pol.config.d_model
    states = [RouterState(agent.L, d, N_ACTIONS) for _ in range(B)]
    prev = np.full(B, pol.null_action, dtype=np.int64)
    rows: list[list[dict]] = [[] for _ in range(B)]
    held_p = [None] * B
    held_z = [0] * B
    held_row = [0] * B
    last_fault = [False] * B
    reroute = agent.mode == "trajectory" and cfg.router.reroute_on_fault
    while True:
        act = [b for b in range(B) if not envs[b].done]
        if not act:
            break
        ids = pol.token_ids(np.stack([obs[b] for b in act]), np.stack([goals[b] for b in act]),
                            prev[act])
        enc = pol.encode(ids)
        wins = [states[b].window() for b in act]
        ha = np.stack([w[0] for w in wins])
        ho = np.stack([w[1] for w in wins])
        hm = np.stack([w[2] for w in wins])
        p, z, tok = agent.route(enc, ha, ho, hm, tau)
        if agent.mode == "trajectory":
            for i, b in enumerate(act):
                t = envs[b].t
                fault_now = bool(envs[b].fault)
                if t == 0 or (reroute and fault_now and not last_fault[b]):
                    held_p[b], held_z[b], held_row[b] = p[i], int(z[i]), t
                last_fault[b] = fault_now
                p[i], z[i] = held_p[b], held_z[b]
        logits = agent.behaviour_logits(ids, z, tok)
        probs = ad.softmax(ad.tensor(logits)).values
        a = sample_actions(probs, rng)
        values = pol.value(enc.pooled).values if agent.use_critic else np.zeros(len(act))
        for i, b in enumerate(act):
            env = envs[b]
            fp = env.fingerprint()
            res = env.step(int(a[i]))
            rows[b].append(dict(
                ids=ids[i], o_emb=enc.obs[i], g_emb=enc.goal[i], pooled=enc.pooled[i],
                hist_a=ha[i], hist_o=ho[i], hist_m=hm[i], tau=tau, p=p[i], z=z[i],
                tok=tok[i], action=a[i], logp_old=np.log(probs[i, a[i]]), probs_old=probs[i],
                logits_old=logits[i], value_old=values[i], reward=res.reward,
                phase=int(res.info["oracle_phase"]),
                category=CATEGORIES.index(res.info["task_category"]),
                group=starts[b][2], t=len(rows[b]), decision=held_row[b], fp=fp))
            states[b].record(int(a[i]), enc.obs[i])
            obs[b] = res.observation.tokens
            prev[b] = a[i]
    cols: dict[str, list] = {}
    fps, trajs = [], []
    pos = 0
    for b in range(B):
        for r in rows[b]:
            for k, v in r.items():
                if k == "fp":
                    continue
                cols.setdefault(k, []).append(v if k != "decision" else v + pos)
            fps.append(r["fp"])
        n = len(rows[b])
        ret = float(sum(r["reward"] for r in rows[b]))
        trajs.append(Trajectory(pos, pos + n, starts[b][2], envs[b].category,
                                bool(envs[b].success), ret))
        pos += n
    arrays = {k: np.asarray(v) for k, v in cols.items()}
    return StepBatch(arrays, fps, trajs)


def compute_advantages(batch: StepBatch, cfg: ExperimentConfig) -> np.ndarray:
    """Per-step advantages for the configured estimator."""
    alg = cfg.algorithm
    A = np.zeros(len(batch))
    if alg.algorithm == "ppo":
        for tr in batch.trajectories:
            sl = slice(tr.start, tr.stop)
            values = np.append(batch.value_old[sl], 0.0)  # episode end, including truncation
            A[sl] = gae_advantages(batch.reward[sl], values, alg.gae_gamma, alg.gae_lambda)
        return A
    groups: dict[int, list[int]] = {}
    for i, tr in enumerate(batch.trajectories):
        groups.setdefault(tr.group, []).append(i)
    for members in groups.values():
        trs = [batch.trajectories[i] for i in members]
        rewards = [batch.reward[tr.start:tr.stop] for tr in trs]
        if alg.algorithm == "gigpo":
            fps = [batch.fingerprints[tr.start:tr.stop] for tr in trs]
            est = gigpo_group_advantages(TrajectoryGroup(rewards, fps), standardize=alg.standardize,
                                         step_gamma=alg.step_gamma)
            for tr, v in zip(trs, est.values):
                A[tr.start:tr.stop] = v
            continue
        group = TrajectoryGroup(rewards)
        per = rloo_advantages(group) if alg.algorithm == "rloo" \
            else grpo_advantages(group, alg.standardize)
        for tr, v in zip(trs, per):
            A[tr.start:tr.stop] = v
    return A


@dataclasses.dataclass
class EvalResult:
    batch: StepBatch
    summary: dict
    switches: list[dict]
    activation: np.ndarray
    expert_entropy: dict


class Trainer:
    """Training loop for one arm and one seed."""

    def __init__(self, cfg: ExperimentConfig, seed: int, run_id: str = "run",
                 agent: Agent | None = None, warm: bool = True):
        self.cfg = cfg
        self.seed = int(seed)
        self.run_id = run_id
        self.agent = agent or Agent(cfg, seed, warm=warm)
        alg = cfg.algorithm
        self.opt = Adam(self.agent.trainable(), lr=alg.lr, betas=tuple(alg.betas))
        self.buffer = ExpertBuffer(self.agent.K, alg.buffer_cap)
        r = cfg.router
        self.schedule = AnnealSchedule(r.tau0, r.tauf, r.T_anneal)
        self.env_rng = stream(seed, "env")
        self.fault_rng = stream(seed, "fault")
        self.rollout_rng = stream(seed, "rollout")
        self.train_rng = stream(seed, "train")
        self.env_steps = 0
        self.updates = 0
        self.records: list[MetricsRecord] = []
        self.occupancy_ledger: list[dict] = []
        self.group_ledger: list[dict] = []
        self.conflict_trace: list[tuple[int, int, float]] = []
        self.expert_usage = np.zeros(self.agent.K)
        self.gradnorm_w: np.ndarray | None = None
        self.gradnorm_l0: dict[int, float] = {}
        self.last_breakdown: LossBreakdown | None = None

    # -- bookkeeping ------------------------------------------------------
    def record(self, name: str, value: float, step: int | None = None, category: str = "",
               expert: str = "", phase: str = "") -> None:
        self.records.append(MetricsRecord(self.run_id, self.seed,
                                          self.env_steps if step is None else step, name,
                                          float(value), category, str(expert), phase))

    @property
    def tau(self) -> float:
        return self.schedule(self.env_steps)

    # -- data -------------------------------------------------------------
    def collect(self) -> StepBatch:
        G = self.cfg.training.groups_per_batch
        n = self.cfg.algorithm.n_group
        starts = []
        for g in range(G):
            seed = int(self.env_rng.integers(2**31))
            for _ in range(n):
                starts.append((seed, int(self.fault_rng.integers(2**31)), g))
        batch = rollout(self.agent, starts, self.rollout_rng, self.tau)
        self.env_steps += len(batch)
        return batch

    # -- losses -----------------------------------------------------------
    def _router_probs(self, mb: StepBatch):
        """Differentiable routing distributions for the minibatch."""
        ag = self.agent
        if ag.mode == "phase":
            return ag.router.probs(mb.o_emb, mb.g_emb, mb.hist_a, mb.hist_o, mb.hist_m, mb.tau)
        if ag.mode == "trajectory":
            dec = np.unique(mb.decision)
            n = len(dec)
            L = ag.L
            p_dec = ag.router.probs(mb.o_emb[dec], mb.g_emb[dec],
                                    np.full((n, L), N_ACTIONS, dtype=np.int64),
                                    np.zeros((n, L, mb.o_emb.shape[1])), np.zeros((n, L), bool),
                                    mb.tau[dec])
            where = np.searchsorted(dec, mb.decision)
            return ad.index(p_dec, where)
        if ag.mode in ("token", "token_top2"):
            return ag.token_router.probs(ag.token_router.micro_hidden(mb.pooled))
        return None

    def _logprobs(self, mb: StepBatch, p):
        """Log-probs of the taken actions, the row order they come in, and ST weights."""
        ag = self.agent
        pol = ag.policy
        N = len(mb)
        if ag.mode in ("token", "token_top2"):
            c_hard = ag.token_weights(mb.tok)
            m = self.cfg.router.token_m
            tok = mb.tok.reshape(N, m, -1)
            mixed = None
            for k in range(ag.K):
                rows = np.flatnonzero(c_hard[:, k] > 0)
                if not rows.size:
                    continue
                mask = (tok[rows] == k).astype(np.float64)              # [n_k, m, top]
                sel = ad.index(p, (rows[:, None], np.arange(m)[None, :], np.full((1, m), k)))
                soft = ad.div(ad.sum(ad.mul(sel, mask.sum(axis=-1)), axis=1), float(tok.shape[1] * tok.shape[2]))
                c = ad.straight_through(c_hard[rows, k], soft)         # [n_k]
                lg = ad.mul(pol.expert_logits(mb.ids[rows], k), ad.reshape(c, (-1, 1)))
                scatter = np.zeros((N, rows.size))
                scatter[rows, np.arange(rows.size)] = 1.0
                part = ad.matmul(scatter, lg)
                mixed = part if mixed is None else ad.add(mixed, part)
            logp = ad.log_softmax(mixed, axis=-1)
            lp = ad.index(logp, (np.arange(N), mb.action))
            return lp, np.arange(N), None
        pieces, order = [], []
        for k in np.unique(mb.z):
            rows = np.flatnonzero(mb.z == k)
            logp = ad.log_softmax(pol.expert_logits(mb.ids[rows], int(k)), axis=-1)
            pieces.append(ad.index(logp, (np.arange(rows.size), mb.action[rows])))
            order.append(rows)
        perm = np.concatenate(order)
        lp = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
        w = None
        if p is not None:
            chosen = ad.index(p, (perm, mb.z[perm]))
            w = ad.straight_through(np.ones(perm.size), chosen)
        return lp, perm, w

    def _phase_losses(self, weighted: ad.Tensor, labels: np.ndarray, N: int) -> dict[int, ad.Tensor]:
        part = PhaseLossPartition.from_labels(labels)
        return {ph: ad.neg(ad.div(ad.sum(ad.index(weighted, rows)), float(N)))
                for ph, rows in part.steps.items()}

    def _flat_grads(self, loss: ad.Tensor, params: list[ad.Tensor]) -> np.ndarray:
        ad.backward(loss, leaves=params)
        return np.concatenate([p.grad.ravel() for p in params])

    def train_step(self, mb: StepBatch, A: np.ndarray, occupancy: dict | None = None) -> LossBreakdown:
        cfg = self.cfg
        alg = cfg.algorithm
        ag = self.agent
        N = len(mb)
        trainable = ag.trainable()
        ad.zero_grad(trainable)
        p = self._router_probs(mb)
        lp, perm, w = self._logprobs(mb, p)
        terms = surrogate_terms(lp, mb.logp_old[perm], A[perm], alg.epsilon)
        weighted = terms if w is None else ad.mul(w, terms)
        l_rl = ad.neg(ad.mean(weighted))

        zero = ad.tensor(0.0)
        l_switch = zero
        if ag.mode == "phase":
            pens = [switching_penalty(ad.index(p, slice(tr.start, tr.stop)), cfg.router.lambda_s,
                                      z=mb.z[tr.start:tr.stop]) for tr in mb.trajectories]
            l_switch = ad.mean(ad.stack(pens)) if pens else zero
        l_bal = zero
        if p is not None and ag.K > 1:
            f = ad.mean(p, axis=0) if p.ndim == 2 else ad.mean(ad.mean(p, axis=1), axis=0)
            l_bal = balance_loss(f, ag.K)

        # the buffer caches states each expert served, with behaviour logits
        for k in range(ag.K):
            rows = np.flatnonzero(mb.z == k)
            for r in rows:
                self.buffer.add(k, mb.ids[r], mb.logits_old[r])
        l_div = zero
        if ag.K > 1 and self.updates % alg.div_interval == 0 and len(self.buffer):
            states = self.buffer.sample(alg.div_sample, self.train_rng)
            l_div = diversity_loss([ag.policy.expert_forward(k, states) for k in range(ag.K)],
                                   alg.tau_div)

        total = ad.add(ad.add(l_rl, ad.mul(l_div, alg.alpha)),
                       ad.add(ad.mul(l_bal, alg.beta), ad.mul(l_switch, alg.gamma_coeff)))
        l_value = zero
        if ag.use_critic:
            v = ag.policy.value(mb.pooled)
            err = ad.sub(v, A + mb.value_old)
            l_value = ad.mean(ad.mul(err, err))

        labels = mb.phase[perm]
        expert_params = ag.policy.expert_params()
        if self.updates % cfg.training.conflict_interval == 0:
            self._record_conflict(weighted, labels, N, expert_params)

        if cfg.surgery != "off":
            self._surgery_backward(weighted, labels, N, l_value)
        else:
            ad.backward(ad.add(total, ad.mul(l_value, alg.value_coef)), leaves=trainable)
        self._check_finite(total, trainable, mb)
        norm = clip_grad_norm(trainable, alg.max_grad_norm)
        self.opt.step()
        self.updates += 1

        if occupancy is not None:
            mags = np.abs(weighted.values)
            cats = mb.category[perm]
            for c, mag in zip(cats, mags):
                occupancy[CATEGORIES[c]] = occupancy.get(CATEGORIES[c], 0.0) + float(mag)
        for k in np.unique(mb.z):
            self.expert_usage[k] += int(np.sum(mb.z == k))
        lb = LossBreakdown(l_rl.item(), l_div.item(), l_bal.item(), l_switch.item(), total.item(),
                           alg.alpha, alg.beta, alg.gamma_coeff, l_value.item(), norm)
        self.last_breakdown = lb
        return lb

    def _record_conflict(self, weighted, labels, N, params) -> None:
        losses = self._phase_losses(weighted, labels, N)
        if len(losses) < 2:
            return
        grads = [self._flat_grads(L, params) for L in losses.values()]
        if sum(1 for g in grads if np.any(g)) < 2:
            return
        score = gradient_conflict_score([g for g in grads if np.any(g)])
        self.conflict_trace.append((self.updates, self.env_steps, score))
        self.record("train/conflict", score)

    def _surgery_backward(self, weighted, labels, N, l_value) -> None:
        cfg = self.cfg
        params = self.agent.policy.expert_params(0)
        losses = self._phase_losses(weighted, labels, N)
        phases = list(losses)
        grads = [self._flat_grads(losses[ph], params) for ph in phases]
        if cfg.surgery == "pcgrad":
            g = pcgrad_combine(grads)
        elif cfg.surgery == "cagrad":
            g = cagrad_combine(grads, cfg.algorithm.cagrad_c) * len(grads)
        else:
            norms = np.array([max(np.linalg.norm(x), 1e-12) for x in grads])
            vals = np.array([losses[ph].item() for ph in phases])
            for ph, v in zip(phases, vals):
                self.gradnorm_l0.setdefault(ph, abs(v) if v != 0 else 1.0)
            if self.gradnorm_w is None:
                self.gradnorm_w = np.ones(len(PHASES))
            prev = np.array([self.gradnorm_w[ph] for ph in phases])
            prev = prev * len(phases) / prev.sum()
            new = gradnorm_weights(vals, norms, cfg.algorithm.gradnorm_asymmetry,
                                   [self.gradnorm_l0[ph] for ph in phases], prev)
            for ph, wv in zip(phases, new):
                self.gradnorm_w[ph] = wv
            g = sum(wv * x for wv, x in zip(new, grads))
        pos = 0
        for prm in params:
            n = prm.values.size
            prm.grad = g[pos:pos + n].reshape(prm.values.shape).copy()
            pos += n
        if self.agent.use_critic:
            ad.backward(ad.mul(l_value, self.cfg.algorithm.value_coef),
                        leaves=list(self.agent.policy.value_head.values()))

    def _check_finite(self, total, params, mb) -> None:
        bad = [p.name for p in params if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if np.isfinite(total.item()) and not bad:
            return
        dump = {"run_id": self.run_id, "seed": self.seed, "update": self.updates,
                "env_steps": self.env_steps, "total_loss": float(total.item()),
                "nonfinite_grads": bad[:20], "batch_rows": len(mb),
                "param_norms": {p.name: float(np.linalg.norm(p.values)) for p in params}}
        raise NumericalAbort(f"non-finite loss or gradient at update {self.updates}", dump)

    # -- loop -------------------------------------------------------------
    def train(self) -> None:
        cfg = self.cfg
        mbs = cfg.training.minibatch_trajectories
        while self.env_steps < cfg.training.total_env_steps:
            tau = self.tau
            batch = self.collect()
            A = compute_advantages(batch, cfg)
            order = self.train_rng.permutation(len(batch.trajectories))
            parts = []
            for i in range(0, len(order), mbs):
                ids = order[i:i + mbs]
                mb = batch.take(ids)
                # one occupancy ledger row per gradient update
                occ: dict = {}
                parts.append(self.train_step(mb, A[batch.rows_of(ids)], occ))
                self.occupancy_ledger.append(occ)
                grp: dict = {}
                for c, v in occ.items():
                    grp[CATEGORY_GROUP[c]] = grp.get(CATEGORY_GROUP[c], 0.0) + v
                self.group_ledger.append(grp)
            self._batch_metrics(batch, parts, tau)

    def _batch_metrics(self, batch: StepBatch, parts: list[LossBreakdown], tau: float) -> None:
        succ = np.mean([tr.success for tr in batch.trajectories])
        sw = np.mean([count_switches(batch.z[tr.start:tr.stop]) for tr in batch.trajectories])
        self.record("train/success", succ)
        self.record("train/switches", sw)
        self.record("train/tau", tau)
        for field in ("l_rl", "l_div", "l_bal", "l_switch", "total", "l_value"):
            self.record(f"loss/{field}", float(np.mean([getattr(b, field) for b in parts])))
        freq = np.bincount(batch.z, minlength=self.agent.K) / len(batch)
        for k, f in enumerate(freq):
            self.record("train/expert_freq", f, expert=str(k))

    # -- evaluation ---------------------------------------------------------
    def evaluate(self, episodes: int | None = None) -> EvalResult:
        cfg = self.cfg
        episodes = cfg.training.eval_episodes if episodes is None else episodes
        rng = stream(self.seed, "eval")
        starts = [(int(rng.integers(2**31)), int(rng.integers(2**31)), i) for i in range(episodes)]
        batch = rollout(self.agent, starts, rng, self.tau)
        ag = self.agent
        K = ag.K
        succ = np.array([tr.success for tr in batch.trajectories], dtype=float)
        cats = [tr.category for tr in batch.trajectories]
        switches = []
        for i, tr in enumerate(batch.trajectories):
            z = batch.z[tr.start:tr.stop]
            if ag.mode in ("token", "token_top2"):
                m = cfg.router.token_m
                toks = batch.tok[tr.start:tr.stop].reshape(tr.length, m, -1)
                step_sw = token_to_step_switches(list(toks))
                token_sw = step_sw
            else:
                step_sw = count_switches(z)
                token_sw = step_sw
            switches.append({"run_id": self.run_id, "episode": i, "routing_mode": ag.mode,
                             "step_switches": int(step_sw), "token_switches": int(token_sw)})
        H = policy_entropy(batch.probs_old)
        activation = expert_activation_frequency(batch.z, batch.phase, K, len(PHASES))
        expert_entropy = {k: float(H[batch.z == k].mean()) for k in range(K) if np.any(batch.z == k)}
        freq = np.bincount(batch.z, minlength=K) / len(batch)
        summary = {
            "success": float(succ.mean()),
            "success_simple": float(np.mean([s for s, c in zip(succ, cats)
                                             if CATEGORY_GROUP[c] == "simple"] or [np.nan])),
            "success_complex": float(np.mean([s for s, c in zip(succ, cats)
                                              if CATEGORY_GROUP[c] == "complex"] or [np.nan])),
            "step_switches": float(np.mean([r["step_switches"] for r in switches])),
            "episode_length": float(np.mean([tr.length for tr in batch.trajectories])),
            "expert_freq": freq.tolist(),
            "activation_ratio": float(freq.max() / freq.min()) if freq.min() > 0 else float("inf"),
            "alignment_overlap": phase_alignment_overlap(batch.z, batch.phase),
            "activation": activation.tolist(),
        }
        for c in CATEGORIES:
            vals = [s for s, cc in zip(succ, cats) if cc == c]
            summary[f"success_{c}"] = float(np.mean(vals)) if vals else float("nan")
        if K > 1:
            probe = batch.ids[:256]
            with ad.no_grad():
                probs = [ag.policy.expert_forward(k, probe).values for k in range(K)]
            kl = mean_pairwise_kl(probs)
            summary["mean_pairwise_kl"] = float(kl.mean())
            summary["collapse_fraction"] = float(np.mean(kl < cfg.algorithm.tau_div))
        ent = phase_entropy_stats(
            (batch.probs_old[tr.start:tr.stop], batch.phase[tr.start:tr.stop])
            for tr in batch.trajectories)
        summary["phase_entropy"] = {PHASES[k]: dataclasses.asdict(v) for k, v in ent.items()}
        summary["expert_entropy"] = expert_entropy
        occ = parameter_occupancy(self.group_ledger, categories=("simple", "complex"))
        summary["occupancy"] = occ
        summary["occupancy_by_category"] = parameter_occupancy(self.occupancy_ledger,
                                                               categories=CATEGORIES)
        third = self.conflict_trace[len(self.conflict_trace) * 2 // 3:]
        summary["conflict_final_third"] = float(np.mean([c for _, _, c in third])) if third else float("nan")
        self._eval_records(summary, activation)
        return EvalResult(batch, summary, switches, activation, expert_entropy)

    def _eval_records(self, s: dict, activation: np.ndarray) -> None:
        for key in ("success", "success_simple", "success_complex", "step_switches",
                    "episode_length", "activation_ratio", "alignment_overlap",
                    "conflict_final_third"):
            self.record(f"eval/{key}", s[key])
        for c in CATEGORIES:
            self.record("eval/success_by_category", s[f"success_{c}"], category=c)
        for k, f in enumerate(s["expert_freq"]):
            self.record("eval/expert_freq", f, expert=str(k))
        for k, h in s["expert_entropy"].items():
            self.record("eval/expert_entropy", h, expert=str(k))
        for ph, st in s["phase_entropy"].items():
            self.record("eval/phase_entropy_mean", st["mean"], phase=ph)
            self.record("eval/phase_entropy_var", st["variance"], phase=ph)
        for ph in range(activation.shape[0]):
            for k in range(activation.shape[1]):
                self.record("eval/activation", activation[ph, k], expert=str(k), phase=PHASES[ph])
        if "mean_pairwise_kl" in s:
            self.record("eval/mean_pairwise_kl", s["mean_pairwise_kl"])
            self.record("eval/collapse_fraction", s["collapse_fraction"])
        for grp, v in s["occupancy"].items():
            self.record("occupancy", v, category=grp)
