"""Synthetic multi-phase environments with exact oracle phase labels.

``PhasedGridWorld`` is a 7x7 room with six task categories. Each episode
walks through Explore (target not yet seen), Navigate (seen, not adjacent),
Manipulate (adjacent, running the category's interaction sequence) and
Recover (a fault was injected and has not been cleared by ``retry``).

``LinearChainEnv`` is a tiny two-phase chain whose optimal return can be
enumerated, used by unit tests.
"""
from __future__ import annotations

import dataclasses
import enum
import itertools
import zlib
from typing import Mapping

import numpy as np

__all__ = [
    "Action", "ACTIONS", "N_ACTIONS", "Phase", "PHASES", "CATEGORIES",
    "SIMPLE", "COMPLEX", "CATEGORY_GROUP", "SEQUENCES", "DEFAULT_CATEGORY_MIX",
    "Goal", "Observation", "StepResult", "EnvConfig", "PhasedGridWorld",
    "LinearChainEnv", "resolve_category_mix", "ConfigError", "UsageError",
]


class ConfigError(ValueError):
    """Invalid environment configuration."""


class UsageError(RuntimeError):
    """Environment used out of protocol (e.g. stepping after ``done``)."""


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    LOOK = 4
    PICK = 5
    PLACE = 6
    TOOL_USE = 7
    RETRY = 8


ACTIONS = tuple(a.name.lower() for a in Action)
N_ACTIONS = len(Action)
MOVES = {Action.UP: (-1, 0), Action.DOWN: (1, 0), Action.LEFT: (0, -1), Action.RIGHT: (0, 1)}
MANIPULATIONS = (Action.LOOK, Action.PICK, Action.PLACE, Action.TOOL_USE)


class Phase(enum.IntEnum):
    EXPLORE = 0
    NAVIGATE = 1
    MANIPULATE = 2
    RECOVER = 3


PHASES = tuple(p.name.capitalize() for p in Phase)

CATEGORIES = ("PickPlace", "Look", "Heat", "Cool", "Clean", "Pick2")
SIMPLE = ("PickPlace", "Look")
COMPLEX = ("Heat", "Cool", "Clean", "Pick2")
CATEGORY_GROUP = {c: ("simple" if c in SIMPLE else "complex") for c in CATEGORIES}

# interaction sequence per target; Pick2 runs its sequence once per target
SEQUENCES: dict[str, tuple[Action, ...]] = {
    "PickPlace": (Action.PICK,),
    "Look": (Action.LOOK,),
    "Heat": (Action.PICK, Action.TOOL_USE, Action.PLACE),
    "Cool": (Action.TOOL_USE, Action.PICK, Action.PLACE),
    "Clean": (Action.PICK, Action.PLACE, Action.TOOL_USE),
    "Pick2": (Action.PICK, Action.PLACE),
}
N_TARGETS = {c: (2 if c == "Pick2" else 1) for c in CATEGORIES}

DEFAULT_CATEGORY_MIX = {"simple": 0.6, "complex": 0.4}

# cell contents in the local view
EMPTY, WALL, TARGET, OTHER_TARGET, DISTRACTOR = range(5)
OFFSET_UNKNOWN = 7  # dx/dy token when the target has not been located


def resolve_category_mix(mix: Mapping[str, float] | None) -> dict[str, float]:
    """Expand a mix over categories and/or the groups ``simple``/``complex``.

    Group mass is split evenly over the group's categories. The result is a
    normalized distribution over :data:`CATEGORIES`.
    """
    if mix is None:
        mix = DEFAULT_CATEGORY_MIX
    out = dict.fromkeys(CATEGORIES, 0.0)
    for key, w in mix.items():
        w = float(w)
        if not np.isfinite(w) or w < 0:
            raise ConfigError(f"category weight for {key!r} must be a nonnegative number")
        if key == "simple":
            for c in SIMPLE:
                out[c] += w / len(SIMPLE)
        elif key == "complex":
            for c in COMPLEX:
                out[c] += w / len(COMPLEX)
        elif key in out:
            out[key] += w
        else:
            raise ConfigError(f"unknown task category {key!r}")
    total = sum(out.values())
    if abs(total - 1.0) > 1e-6:
        raise ConfigError(f"category_mix must sum to 1, got {total}")
    return {c: w / total for c, w in out.items()}


@dataclasses.dataclass(frozen=True)
class Goal:
    task_category: str
    target_objects: tuple[int, ...]
    tokens: tuple[int, ...]
    embedding: np.ndarray = dataclasses.field(repr=False, compare=False)


@dataclasses.dataclass(frozen=True)
class Observation:
    tokens: np.ndarray                 # int token per slot
    vocab: tuple[int, ...] = dataclasses.field(repr=False)

    @property
    def features(self) -> np.ndarray:
        """Concatenated one-hot encoding of every slot; constant width."""
        out = np.zeros(sum(self.vocab))
        offsets = np.concatenate([[0], np.cumsum(self.vocab)[:-1]])
        out[offsets + self.tokens] = 1.0
        return out


@dataclasses.dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict


@dataclasses.dataclass
class EnvConfig:
    grid_size: int = 7
    max_steps: int = 50
    p_fault: float = 0.1
    category_mix: dict = dataclasses.field(default_factory=lambda: dict(DEFAULT_CATEGORY_MIX))
    sight_radius: int = 2
    n_distractors: int = 3
    shaped_reward: bool = False

    def validate(self) -> None:
        if self.grid_size < 5:
            raise ConfigError("grid_size must be at least 5")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if not 0.0 <= self.p_fault < 1.0:
            raise ConfigError("p_fault must lie in [0, 1)")
        if self.sight_radius < 1:
            raise ConfigError("sight_radius must be at least 1")
        resolve_category_mix(self.category_mix)


def _goal_embedding(category: str, targets: tuple[int, ...], width: int = 16) -> np.ndarray:
    onehot = np.zeros(len(CATEGORIES))
    onehot[CATEGORIES.index(category)] = 1.0
    hashed = np.zeros(width)
    for t in targets:
        h = zlib.crc32(f"obj{t}".encode())
        hashed[h % width] += 1.0 if (h >> 16) & 1 else -1.0
    return np.concatenate([onehot, hashed])


class PhasedGridWorld:
    """Grid room with oracle phases. Not thread-safe; one instance per worker."""

    def __init__(self, config: EnvConfig | None = None):
        self.config = config or EnvConfig()
        self.config.validate()
        self._mix = resolve_category_mix(self.config.category_mix)
        n = self.config.grid_size
        # slots: 9 local cells, row, col, located, progress, fault, cycle, dx, dy
        self.obs_vocab: tuple[int, ...] = (5,) * 9 + (n, n, 2, 4, 2, 2, 8, 8)
        self.goal_vocab: tuple[int, ...] = (len(CATEGORIES), 3)
        self.n_actions = N_ACTIONS
        self.done = True
        self.t = 0

    # -- layout ---------------------------------------------------------
    def reset(self, seed: int, category_mix: Mapping[str, float] | None = None,
              fault_seed: int | None = None) -> tuple[Observation, Goal]:
        mix = self._mix if category_mix is None else resolve_category_mix(category_mix)
        rng = np.random.default_rng([int(seed), 0])
        self._fault_rng = np.random.default_rng([int(seed if fault_seed is None else fault_seed), 1])
        cats = list(mix)
        probs = np.array([mix[c] for c in cats])
        category = cats[int(rng.choice(len(cats), p=probs))]
        n = self.config.grid_size
        r = self.config.sight_radius
        cells = [(i, j) for i in range(n) for j in range(n)]
        self.agent = cells[int(rng.integers(len(cells)))]
        far = [c for c in cells
               if max(abs(c[0] - self.agent[0]), abs(c[1] - self.agent[1])) > r]
        n_targets = N_TARGETS[category]
        picks = rng.choice(len(far), size=n_targets, replace=False)
        self.targets = [far[int(i)] for i in picks]
        taken = {self.agent, *self.targets}
        free = [c for c in cells if c not in taken]
        while True:
            d_idx = rng.choice(len(free), size=self.config.n_distractors, replace=False)
            self.distractors = [free[int(i)] for i in d_idx]
            if self._solvable():
                break
        self.objects = {i: pos for i, pos in enumerate(self.targets + self.distractors)}
        self.category = category
        self.sequence = SEQUENCES[category]
        self.goal = Goal(category, tuple(range(n_targets)),
                         (CATEGORIES.index(category), n_targets),
                         _goal_embedding(category, tuple(range(n_targets))))
        self.completed: set = set()
        self.cycle = 0
        self.progress = 0
        self.fault = False
        self.located = False
        self.success = False
        self.t = 0
        self.done = False
        self._update_located()
        return self.observe(), self.goal

    # -- state helpers ----------------------------------------------------
    @property
    def target(self) -> tuple[int, int]:
        return self.targets[self.cycle]

    def _solvable(self) -> bool:
        # every target needs a free 4-neighbour reachable from the start cell
        n = self.config.grid_size
        walls = set(self.targets) | set(self.distractors)
        seen = {self.agent}
        frontier = [self.agent]
        while frontier:
            i, j = frontier.pop()
            for di, dj in MOVES.values():
                c = (i + di, j + dj)
                if 0 <= c[0] < n and 0 <= c[1] < n and c not in walls and c not in seen:
                    seen.add(c)
                    frontier.append(c)
        return all(any((ti + di, tj + dj) in seen for di, dj in MOVES.values())
                   for ti, tj in self.targets)

    def _blocked(self, cell) -> bool:
        n = self.config.grid_size
        i, j = cell
        if not (0 <= i < n and 0 <= j < n):
            return True
        return cell in self.objects.values()

    def _update_located(self) -> None:
        ti, tj = self.target
        ai, aj = self.agent
        if max(abs(ti - ai), abs(tj - aj)) <= self.config.sight_radius:
            self.located = True

    def adjacent(self) -> bool:
        ti, tj = self.target
        ai, aj = self.agent
        return abs(ti - ai) + abs(tj - aj) == 1

    def oracle_phase(self) -> Phase:
        if self.fault:
            return Phase.RECOVER
        if not self.located:
            return Phase.EXPLORE
        if not self.adjacent():
            return Phase.NAVIGATE
        return Phase.MANIPULATE

    def fingerprint(self) -> tuple:
        """Exact discrete state tuple used to cluster anchor states."""
        return (self.agent, self.cycle, self.progress, self.fault, self.located)

    def _cell(self, cell) -> int:
        n = self.config.grid_size
        i, j = cell
        if not (0 <= i < n and 0 <= j < n):
            return WALL
        if cell == self.target:
            return TARGET
        if cell in self.targets and cell not in self.completed:
            return OTHER_TARGET
        if cell in self.distractors:
            return DISTRACTOR
        return EMPTY

    def observe(self) -> Observation:
        ai, aj = self.agent
        view = [self._cell((ai + di, aj + dj)) for di in (-1, 0, 1) for dj in (-1, 0, 1)]
        if self.located:
            dx = int(np.clip(self.target[0] - ai, -3, 3)) + 3
            dy = int(np.clip(self.target[1] - aj, -3, 3)) + 3
        else:
            dx = dy = OFFSET_UNKNOWN
        tokens = np.array(view + [ai, aj, int(self.located), self.progress,
                                  int(self.fault), self.cycle, dx, dy], dtype=np.int64)
        return Observation(tokens, self.obs_vocab)

    # -- dynamics ---------------------------------------------------------
    def step(self, action: int) -> StepResult:
        if self.done:
            raise UsageError("step() called on a finished episode; call reset()")
        action = Action(int(action))
        phase = self.oracle_phase()
        reward = 0.0
        shaped = 0.0
        if self.fault:
            if action == Action.RETRY:
                self.fault = False
        elif action in MOVES:
            di, dj = MOVES[action]
            nxt = (self.agent[0] + di, self.agent[1] + dj)
            if not self._blocked(nxt):
                self.agent = nxt
                self._update_located()
        elif action in MANIPULATIONS and self.adjacent():
            expected = self.sequence[self.progress]
            if action == expected:
                if self._fault_rng.random() < self.config.p_fault:
                    self.fault = True
                else:
                    self.progress += 1
                    shaped += 0.1
                    if self.progress == len(self.sequence):
                        self._finish_cycle()
            elif len(self.sequence) > 1:
                # failed tool interaction restarts the sequence
                self.progress = 0
        self.t += 1
        if self.success:
            reward = 1.0
        elif self.config.shaped_reward:
            reward = shaped
        self.done = self.success or self.t >= self.config.max_steps
        info = {"oracle_phase": phase, "task_category": self.category,
                "success": self.success, "next_phase": self.oracle_phase()}
        return StepResult(self.observe(), reward, self.done, info)

    def _finish_cycle(self) -> None:
        self.progress = 0
        if self.cycle + 1 < len(self.targets):
            done_target = self.targets[self.cycle]
            self.cycle += 1
            # a completed object is removed from the room
            self.objects = {k: v for k, v in self.objects.items() if v != done_target}
            self.completed.add(done_target)
            self.located = False
            self._update_located()
        else:
            self.success = True


class LinearChainEnv:
    """Length-T chain: emit A for the first ``switch_at`` steps, then B.

    Each matching emission earns 1/T, so the optimal return is exactly 1.
    The observation exposes the step index only, so the policy must learn
    where the phase boundary is.
    """

    A, B = 0, 1

    def __init__(self, length: int = 6, switch_at: int | None = None):
        if length < 2:
            raise ConfigError("chain length must be at least 2")
        self.length = length
        self.switch_at = length // 2 if switch_at is None else switch_at
        if not 0 < self.switch_at < length:
            raise ConfigError("switch_at must fall strictly inside the chain")
        self.obs_vocab = (length + 1,)
        self.goal_vocab = (1, 1)
        self.n_actions = 2
        self.done = True

    def reset(self, seed: int = 0, category_mix=None, fault_seed=None):
        self.t = 0
        self.done = False
        self.goal = Goal("Chain", (), (0, 0), np.zeros(1))
        return self.observe(), self.goal

    def oracle_phase(self) -> int:
        return 0 if self.t < self.switch_at else 1

    def fingerprint(self) -> tuple:
        return (self.t,)

    def observe(self) -> Observation:
        return Observation(np.array([self.t], dtype=np.int64), self.obs_vocab)

    def step(self, action: int) -> StepResult:
        if self.done:
            raise UsageError("step() called on a finished episode; call reset()")
        phase = self.oracle_phase()
        wanted = self.A if phase == 0 else self.B
        reward = (1.0 / self.length) if int(action) == wanted else 0.0
        self.t += 1
        self.done = self.t >= self.length
        return StepResult(self.observe(), reward, self.done,
                          {"oracle_phase": phase, "task_category": "Chain",
                           "success": self.done, "next_phase": None})

    def optimal_return(self) -> float:
        """Brute-force maximum return over all 2^T action sequences."""
        best = -np.inf
        for seq in itertools.product((self.A, self.B), repeat=self.length):
            ret = sum((1.0 / self.length) for t, a in enumerate(seq)
                      if a == (self.A if t < self.switch_at else self.B))
            best = max(best, ret)
        return best
