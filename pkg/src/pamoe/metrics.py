"""Routing and training analyses: phases, occupancy, conflict, entropy, overlap.

Entropies are in bits throughout. CSV writers emit the tidy tables the
report step aggregates.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from collections import Counter
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .policy import policy_entropy
from .router import count_switches

__all__ = [
    "PhaseSegment", "MetricsRecord", "PhaseEntropy", "extract_phases", "parameter_occupancy",
    "gradient_conflict_score", "phase_entropy_stats", "expert_activation_frequency",
    "phase_alignment_overlap", "majority_mapping", "mean_std", "write_metrics_csv",
    "write_switches_csv", "write_occupancy_csv", "read_csv", "METRICS_FIELDS",
    "SWITCHES_FIELDS", "OCCUPANCY_FIELDS", "count_switches",
]

log = logging.getLogger(__name__)

METRICS_FIELDS = ("run_id", "seed", "step", "name", "value", "tag_category", "tag_expert",
                  "tag_phase")
SWITCHES_FIELDS = ("run_id", "episode", "routing_mode", "step_switches", "token_switches")
OCCUPANCY_FIELDS = ("run_id", "category", "occupancy")


@dataclasses.dataclass(frozen=True)
class PhaseSegment:
    expert: int
    start: int
    end: int     # inclusive

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclasses.dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    seed: int
    step: int
    name: str
    value: float
    tag_category: str = ""
    tag_expert: str = ""
    tag_phase: str = ""

    def row(self) -> dict:
        return dataclasses.asdict(self)


def extract_phases(z: Sequence[int]) -> list[PhaseSegment]:
    """Maximal runs of one expert index, in order."""
    z = [int(v) for v in z]
    if not z:
        raise ValueError("phase extraction needs a nonempty sequence")
    out = []
    start = 0
    for t in range(1, len(z) + 1):
        if t == len(z) or z[t] != z[start]:
            out.append(PhaseSegment(z[start], start, t - 1))
            start = t
    return out


def parameter_occupancy(ledger: Iterable[Mapping[str, float]], threshold: float = 0.5,
                        categories: Sequence[str] | None = None) -> dict[str, float]:
    """Fraction of batches in which a category's share of the batch loss exceeds ``threshold``.

    Batches whose losses sum to zero are dropped with a warning.
    """
    rows = [dict(r) for r in ledger]
    cats = list(categories) if categories is not None else sorted({c for r in rows for c in r})
    wins = dict.fromkeys(cats, 0)
    used = 0
    for r in rows:
        vals = {c: float(r.get(c, 0.0)) for c in cats}
        if any(v < 0 for v in vals.values()):
            raise ValueError("batch losses must be nonnegative")
        total = sum(vals.values())
        if total <= 0:
            log.warning("skipping a batch with zero total loss")
            continue
        used += 1
        for c, v in vals.items():
            if v / total > threshold:
                wins[c] += 1
    if used == 0:
        return dict.fromkeys(cats, 0.0)
    return {c: wins[c] / used for c in cats}


def gradient_conflict_score(grads: Sequence[np.ndarray]) -> float:
    """Mean over ordered pairs of max(0, -cos(g_i, g_j)); zero-norm pairs add 0."""
    G = [np.ravel(np.asarray(g, dtype=np.float64)) for g in grads]
    n = len(G)
    if n < 2:
        raise ValueError("conflict score needs at least two gradients")
    norms = [float(np.linalg.norm(g)) for g in G]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if norms[i] == 0.0 or norms[j] == 0.0:
                log.warning("zero gradient in conflict score; pair (%d, %d) counts as 0", i, j)
                continue
            cos = float(G[i] @ G[j]) / (norms[i] * norms[j])
            total += max(0.0, -cos)
    return total / (n * n - n)


@dataclasses.dataclass
class PhaseEntropy:
    mean: float            # bits
    variance: float        # bits^2, over all steps carrying the label
    segment_variance: float  # bits^2, mean within-segment variance
    abs_deviation: float   # mean |H_t - phase mean|
    n_steps: int


def phase_entropy_stats(episodes: Iterable[tuple[np.ndarray, Sequence[int]]]) -> dict[int, PhaseEntropy]:
    """Per-phase entropy statistics.

    Each episode is ``(probs [T, A], labels [T])``; labels are router expert
    indices or oracle phases. Phases with no steps are omitted.
    """
    per_label: dict[int, list[float]] = {}
    seg_vars: dict[int, list[float]] = {}
    for probs, labels in episodes:
        H = np.atleast_1d(policy_entropy(np.asarray(probs)))
        labels = [int(v) for v in labels]
        if len(labels) != len(H):
            raise ValueError("one label per step is required")
        if not labels:
            continue
        for seg in extract_phases(labels):
            h = H[seg.start:seg.end + 1]
            per_label.setdefault(seg.expert, []).extend(h.tolist())
            seg_vars.setdefault(seg.expert, []).append(float(np.var(h)))
    out = {}
    for lab in sorted(per_label):
        h = np.array(per_label[lab])
        out[lab] = PhaseEntropy(float(h.mean()), float(h.var()), float(np.mean(seg_vars[lab])),
                                float(np.abs(h - h.mean()).mean()), int(h.size))
    return out


def expert_activation_frequency(z: Sequence[int], phases: Sequence[int], K: int,
                                n_phases: int) -> np.ndarray:
    """[n_phases, K] matrix: row = phase, entry = share of its steps routed to the expert.

    Rows of phases that never occur are NaN.
    """
    z = np.asarray(z, dtype=np.int64)
    phases = np.asarray(phases, dtype=np.int64)
    if z.shape != phases.shape:
        raise ValueError("z and phases must align")
    out = np.full((n_phases, K), np.nan)
    for ph in range(n_phases):
        sel = z[phases == ph]
        if sel.size:
            out[ph] = np.bincount(sel, minlength=K)[:K] / sel.size
    return out


def majority_mapping(z: Sequence[int], oracle: Sequence[int]) -> dict[int, int]:
    """Map each expert to the oracle label it co-occurs with most (lowest label on ties)."""
    votes: dict[int, Counter] = {}
    for k, o in zip(z, oracle):
        votes.setdefault(int(k), Counter())[int(o)] += 1
    return {k: min(c, key=lambda lab: (-c[lab], lab)) for k, c in votes.items()}


def phase_alignment_overlap(z: Sequence[int], oracle: Sequence[int],
                            mapping: Mapping[int, int] | None = None) -> float:
    """Fraction of steps whose expert, mapped to an oracle label, equals the oracle label."""
    z = [int(v) for v in z]
    oracle = [int(v) for v in oracle]
    if len(z) != len(oracle):
        raise ValueError("router and oracle sequences must have equal length")
    if not z:
        raise ValueError("overlap of empty sequences")
    mapping = majority_mapping(z, oracle) if mapping is None else mapping
    hits = sum(1 for k, o in zip(z, oracle) if mapping.get(k) == o)
    return hits / len(z)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (a single value has std 0)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


# ---------------------------------------------------------------- CSV

def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def _write(path: str | Path, fields: Sequence[str], rows: Iterable[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fields])


def write_metrics_csv(path: str | Path, records: Iterable[MetricsRecord]) -> None:
    _write(path, METRICS_FIELDS, (r.row() for r in records))


def write_switches_csv(path: str | Path, rows: Iterable[Mapping]) -> None:
    _write(path, SWITCHES_FIELDS, rows)


def write_occupancy_csv(path: str | Path, rows: Iterable[Mapping]) -> None:
    _write(path, OCCUPANCY_FIELDS, rows)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
