"""Self-check battery: op gradients, expert isolation, switch-penalty gradient, schedule.

``run_selfcheck`` returns one ``CheckResult`` per check; the CLI prints
them and exits non-zero if any fails.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .algorithms import surrogate_terms
from .config import ExperimentConfig, parse_config
from .gradcheck import check_all_ops
from .router import AnnealSchedule, switching_penalty
from .training import Agent, Trainer, compute_advantages

__all__ = ["CheckResult", "isolation_audit", "switch_penalty_check", "schedule_check",
           "run_selfcheck"]


@dataclasses.dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def _audit_config(K: int) -> ExperimentConfig:
    return parse_config({"policy": {"K": K}, "routing": "phase",
                         "training": {"groups_per_batch": 1, "seeds": [0]},
                         "algorithm": {"n_group": 4}})


def isolation_audit(seed: int = 0, K: int = 4) -> CheckResult:
    """Cross-expert gradients are bitwise zero and unselected experts do not move.

    Routing decisions in the audited batch are overwritten with a random
    assignment over all K experts, so every ordered pair is exercised even
    when the untrained router favours one expert.
    """
    cfg = _audit_config(K)
    tr = Trainer(cfg, seed, agent=Agent(cfg, seed, warm=False))
    batch = tr.collect()
    rng = np.random.default_rng([seed, 99])
    batch.cols["z"] = rng.integers(0, K, size=len(batch))
    A = compute_advantages(batch, cfg)
    pol = tr.agent.policy
    experts = [pol.expert_params(k) for k in range(K)]
    everything = [p for ps in experts for p in ps]

    p = tr._router_probs(batch)
    lp, perm, w = tr._logprobs(batch, p)
    terms = ad.mul(w, surrogate_terms(lp, batch.logp_old[perm], A[perm], cfg.algorithm.epsilon))
    zs = batch.z[perm]
    leaks = []
    for j in range(K):
        rows = np.flatnonzero(zs == j)
        if not rows.size:
            continue
        ad.backward(ad.neg(ad.sum(ad.index(terms, rows))), leaves=everything)
        for i in range(K):
            if i != j and any(np.any(q.grad != 0) for q in experts[i]):
                leaks.append((j, i))
    # two updates: all experts, then only experts 0 and 1; Adam momentum must not move 2..K-1
    tr.updates = 1                       # not a diversity step
    batch.cols["z"] = rng.integers(0, K, size=len(batch))
    tr.train_step(batch, A)
    before = [[q.values.copy() for q in ps] for ps in experts]
    batch.cols["z"] = rng.integers(0, 2, size=len(batch))
    tr.train_step(batch, A)
    moved = [k for k in range(2, K)
             if any(not np.array_equal(a, q.values) for a, q in zip(before[k], experts[k]))]
    ok = not leaks and not moved
    return CheckResult("gradient isolation", ok,
                       f"cross-expert leaks {leaks or 'none'}; unselected experts moved {moved or 'none'}")


def switch_penalty_check(trials: int = 200, seed: int = 0, lambda_s: float = 0.05) -> CheckResult:
    """Backward equals -lambda_s/(T-1) * p_{t+1} on random episodes."""
    rng = np.random.default_rng([seed, 7])
    worst = 0.0
    for _ in range(trials):
        T, K = int(rng.integers(2, 12)), int(rng.integers(2, 6))
        p = ad.parameter(rng.dirichlet(np.ones(K), size=T))
        ad.backward(switching_penalty(p, lambda_s), leaves=[p])
        want = np.zeros((T, K))
        want[:-1] = -lambda_s / (T - 1) * p.values[1:]
        worst = max(worst, float(np.abs(p.grad - want).max()))
    return CheckResult("switching-penalty gradient", worst <= 1e-10, f"max abs error {worst:.2e}")


def schedule_check() -> CheckResult:
    s = AnnealSchedule(2.0, 0.5, 3000)
    vals = (s(0), s(1500), s(3000), s(10_000))
    ok = vals[0] == 2.0 and vals[2] == 0.5 and vals[3] == 0.5 and abs(vals[1] - 1.25) < 1e-12
    return CheckResult("temperature schedule", ok, "tau(0, 1500, 3000, 10000) = " +
                       ", ".join(f"{v:g}" for v in vals))


def run_selfcheck(cases: int = 100, seed: int = 0) -> list[CheckResult]:
    out = []
    for r in check_all_ops(cases, seed):
        out.append(CheckResult(f"grad {r.op}", r.ok, f"{r.cases} cases, worst rel err {r.worst_rel_err:.2e}"))
    out.append(isolation_audit(seed))
    out.append(switch_penalty_check(seed=seed))
    out.append(schedule_check())
    return out
