"""Run orchestration: seeded training runs, routing comparison, ablation sweeps, reports.

Layout under the output root::

    <root>/<run_name>/manifest.json        written before training starts
    <root>/<run_name>/config.yaml          resolved config snapshot
    <root>/<run_name>/seed<k>/metrics.csv, switches.csv, occupancy.csv,
                              summary.json, checkpoint.bin
    <root>/<run_name>/timing.json          wall-clock, written last

Every arm of a sweep shares the root seed and therefore its environment,
fault and evaluation streams, so arm comparisons are paired.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ExperimentConfig, config_to_dict, dump_config, parse_config
from .envs import CATEGORIES, UsageError
from .metrics import (mean_std, read_csv, write_metrics_csv, write_occupancy_csv,
                      write_switches_csv)
from .policy import save_checkpoint
from .training import NumericalAbort, Trainer

__all__ = [
    "OUTPUT_ROOT_ENV", "RunManifest", "output_root", "code_version", "run_experiment",
    "compare_routing", "ablate", "report", "ABLATION_AXES", "ablation_arms", "routing_arms",
]

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PAMOE_OUTPUT_ROOT"
ABLATION_AXES = ("K", "regularizers", "router_components", "surgery")


def output_root(cfg: ExperimentConfig | None = None, override: str | None = None) -> Path:
    """Explicit override, then the environment variable, then the config value."""
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_ROOT_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir if cfg is not None else "runs")


def code_version() -> str:
    """SHA-256 over the package's source files."""
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for path in sorted(pkg.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@dataclasses.dataclass(frozen=True)
class RunManifest:
    run_name: str
    config: dict
    code_version: str
    seeds: tuple
    seed_dirs: dict
    started_at: float

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _clean(o):
    """Replace non-finite floats so summaries stay valid JSON."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)):
        v = float(o)
        return v if math.isfinite(v) else str(v)
    return o


def run_experiment(cfg: ExperimentConfig, root: str | Path | None = None, run_name: str | None = None,
                   seeds: Sequence[int] | None = None, arm: str = "") -> dict[int, dict]:
    """Train and evaluate one configuration for each seed; returns per-seed summaries."""
    cfg.validate()
    seeds = tuple(cfg.training.seeds if seeds is None else seeds)
    name = run_name or cfg.run_name
    base = output_root(cfg, str(root) if root is not None else None) / name
    base.mkdir(parents=True, exist_ok=True)
    seed_dirs = {str(s): str(base / f"seed{s}") for s in seeds}
    (base / "config.yaml").write_text(dump_config(cfg))
    RunManifest(name, config_to_dict(cfg), code_version(), seeds, seed_dirs,
                time.time()).write(base / "manifest.json")
    t0 = time.time()
    out: dict[int, dict] = {}
    for s in seeds:
        sd = base / f"seed{s}"
        sd.mkdir(exist_ok=True)
        run_id = f"{name}/seed{s}"
        tr = Trainer(cfg, s, run_id=run_id)
        try:
            tr.train()
        except NumericalAbort as exc:
            (sd / "nan_dump.json").write_text(json.dumps(_clean(exc.dump), indent=2,
                                                         default=_json_default) + "\n")
            write_metrics_csv(sd / "metrics.csv", tr.records)
            raise
        ev = tr.evaluate()
        summary = dict(ev.summary, arm=arm or name, seed=s, routing=cfg.routing, K=cfg.policy.K,
                       surgery=cfg.surgery, env_steps=tr.env_steps, updates=tr.updates,
                       warmup=tr.agent.warmup_stats,
                       conflict_trace=[list(c) for c in tr.conflict_trace])
        write_metrics_csv(sd / "metrics.csv", tr.records)
        write_switches_csv(sd / "switches.csv", ev.switches)
        occ_rows = [{"run_id": run_id, "category": c, "occupancy": v}
                    for c, v in ev.summary["occupancy"].items()]
        occ_rows += [{"run_id": run_id, "category": c, "occupancy": v}
                     for c, v in ev.summary["occupancy_by_category"].items()]
        write_occupancy_csv(sd / "occupancy.csv", occ_rows)
        (sd / "summary.json").write_text(json.dumps(_clean(summary), indent=2, sort_keys=True,
                                                    default=_json_default) + "\n")
        if cfg.training.checkpoint:
            save_checkpoint(sd / "checkpoint.bin", tr.agent.named_state())
        out[s] = summary
    (base / "timing.json").write_text(json.dumps({"wall_clock_s": time.time() - t0}) + "\n")
    return out


def _variant(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path changes, re-validated."""
    raw = config_to_dict(cfg)
    for path, value in changes.items():
        node = raw
        keys = path.split("__")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    return parse_config(raw)


def routing_arms(cfg: ExperimentConfig) -> dict[str, ExperimentConfig]:
    K = max(cfg.policy.K, 2)
    return {
        "token": _variant(cfg, routing="token", policy__K=K, surgery="off"),
        "trajectory": _variant(cfg, routing="trajectory", policy__K=K, surgery="off"),
        "phase": _variant(cfg, routing="phase", policy__K=K, surgery="off"),
    }


def ablation_arms(cfg: ExperimentConfig, axis: str) -> dict[str, ExperimentConfig]:
    if axis not in ABLATION_AXES:
        raise UsageError(f"axis must be one of {ABLATION_AXES}")
    base = _variant(cfg, routing="phase", surgery="off",
                    policy__K=cfg.policy.K if cfg.policy.K >= 2 else 4)
    if axis == "K":
        arms = {"K=0": _variant(base, routing="none", policy__K=0)}
        for k in (2, 3, 4, 5, 6):
            arms[f"K={k}"] = _variant(base, policy__K=k)
        return arms
    if axis == "regularizers":
        a, b = base.algorithm.alpha, base.algorithm.beta
        return {"both": base,
                "no-div": _variant(base, algorithm__alpha=0.0, algorithm__beta=b),
                "no-bal": _variant(base, algorithm__alpha=a, algorithm__beta=0.0),
                "neither": _variant(base, algorithm__alpha=0.0, algorithm__beta=0.0)}
    if axis == "router_components":
        return {"full": base,
                "no-history": _variant(base, router__use_history=False),
                "no-goal-attention": _variant(base, router__use_goal_attention=False),
                "neither": _variant(base, router__use_history=False,
                                    router__use_goal_attention=False)}
    single = _variant(base, routing="none", policy__K=0)
    return {"K=0": single,
            "pcgrad": _variant(single, surgery="pcgrad"),
            "gradnorm": _variant(single, surgery="gradnorm"),
            "cagrad": _variant(single, surgery="cagrad"),
            "pa-moe": base}


def _row(arm: str, seed: int, s: dict) -> dict:
    freq = s.get("expert_freq") or [1.0]
    return {"arm": arm, "seed": seed, "success": s["success"],
            "success_simple": s["success_simple"], "success_complex": s["success_complex"],
            "step_switches": s["step_switches"], "max_expert_freq": max(freq),
            "activation_ratio": s["activation_ratio"],
            "mean_pairwise_kl": s.get("mean_pairwise_kl", float("nan")),
            "collapse_fraction": s.get("collapse_fraction", float("nan")),
            "conflict_final_third": s["conflict_final_third"],
            "occupancy_simple": s["occupancy"]["simple"],
            "occupancy_complex": s["occupancy"]["complex"]}


def _write_table(path: Path, rows: list[dict]) -> None:
    import csv
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _sweep(arms: dict[str, ExperimentConfig], root: Path, prefix: str,
           seeds: Sequence[int] | None) -> tuple[list[dict], dict]:
    rows, results = [], {}
    for arm, acfg in arms.items():
        safe = arm.replace("=", "").replace("/", "_")
        res = run_experiment(acfg, root, f"{prefix}/{safe}", seeds, arm=arm)
        results[arm] = res
        for s in sorted(res):
            rows.append(_row(arm, s, res[s]))
    return rows, results


def compare_routing(cfg: ExperimentConfig, root: str | Path | None = None,
                    seeds: Sequence[int] | None = None, name: str = "compare_routing") -> dict:
    """Token, trajectory and phase routing on shared seeds."""
    base = output_root(cfg, str(root) if root is not None else None)
    rows, results = _sweep(routing_arms(cfg), base, name, seeds)
    out = base / name
    switch_rows = []
    for arm, res in results.items():
        for s in sorted(res):
            for r in read_csv(out / arm / f"seed{s}" / "switches.csv"):
                switch_rows.append(r)
    write_switches_csv(out / "switches.csv", switch_rows)
    _write_table(out / "compare_routing.csv", rows)
    return results


def ablate(cfg: ExperimentConfig, axis: str, root: str | Path | None = None,
           seeds: Sequence[int] | None = None) -> dict:
    base = output_root(cfg, str(root) if root is not None else None)
    rows, results = _sweep(ablation_arms(cfg, axis), base, f"ablate_{axis}", seeds)
    _write_table(base / f"ablate_{axis}" / f"ablation_{axis}.csv", rows)
    return results


def _load_summaries(run_dirs: Iterable[str | Path]) -> list[tuple[Path, dict]]:
    found = []
    for d in run_dirs:
        d = Path(d)
        paths = sorted(d.glob("seed*/summary.json")) or sorted(d.glob("**/seed*/summary.json"))
        if not paths:
            log.warning("no completed seeds under %s", d)
            continue
        for p in paths:
            found.append((p.parent, json.loads(p.read_text())))
    return found


def _num(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def report(run_dirs: Sequence[str | Path], out: str | Path | None = None) -> dict:
    """Aggregate seeds of completed runs into summary tables and figure-data CSVs."""
    if not run_dirs:
        raise UsageError("report needs at least one run directory")
    found = _load_summaries(run_dirs)
    if not found:
        raise UsageError("none of the given directories contains a completed run")
    out = Path(out) if out else Path(run_dirs[0])
    out.mkdir(parents=True, exist_ok=True)
    by_arm: dict[str, list[tuple[Path, dict]]] = {}
    for d, s in found:
        by_arm.setdefault(str(s.get("arm", d.parent.name)), []).append((d, s))

    success_rows, occ_rows, conflict_rows, entropy_rows = [], [], [], []
    tables = {}
    for arm in sorted(by_arm):
        items = by_arm[arm]
        row = {"arm": arm, "n_seeds": len(items)}
        for key in ["success", "success_simple", "success_complex"] + [f"success_{c}" for c in CATEGORIES]:
            m, sd = mean_std([_num(s.get(key)) for _, s in items])
            row[f"{key}_mean"], row[f"{key}_std"] = m, sd
        m, sd = mean_std([_num(s.get("step_switches")) for _, s in items])
        row["step_switches_mean"], row["step_switches_std"] = m, sd
        success_rows.append(row)
        tables[arm] = row
        for grp in ("simple", "complex"):
            m, sd = mean_std([_num(s["occupancy"].get(grp)) for _, s in items])
            occ_rows.append({"arm": arm, "category": grp, "occupancy_mean": m, "occupancy_std": sd})
        for d, s in items:
            for upd, env_step, score in s.get("conflict_trace", []):
                conflict_rows.append({"arm": arm, "seed": s.get("seed"), "update": upd,
                                      "env_step": env_step, "conflict": score})
            for ph, st in (s.get("phase_entropy") or {}).items():
                entropy_rows.append({"arm": arm, "seed": s.get("seed"), "source": "oracle",
                                     "label": ph, "mean_bits": st["mean"],
                                     "variance_bits2": st["variance"],
                                     "abs_deviation_bits": st["abs_deviation"],
                                     "variance_below_0.18": _num(st["variance"]) < 0.18})
            for k, h in (s.get("expert_entropy") or {}).items():
                entropy_rows.append({"arm": arm, "seed": s.get("seed"), "source": "router",
                                     "label": f"expert{k}", "mean_bits": h,
                                     "variance_bits2": float("nan"),
                                     "abs_deviation_bits": float("nan"),
                                     "variance_below_0.18": ""})
    _write_table(out / "report_success.csv", success_rows)
    _write_table(out / "report_occupancy.csv", occ_rows)
    _write_table(out / "report_conflict.csv", conflict_rows)
    _write_table(out / "report_entropy.csv", entropy_rows)
    return tables



