"""8x8 speaker/listener goal-reaching grid world.

The speaker sees the goal and never moves; the listener sees only its own
position and whatever arrives over the channel. Actions: up (+y), down (-y),
left (-x), right (+x), stay. Moves are clipped at the border. Reaching the
goal pays +1 and ends the episode; every other step costs 0.01; after 32
steps without success the episode ends as a failure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID_SIZE = 8
T_MAX = 32
SUCCESS_REWARD = 1.0
STEP_PENALTY = -0.01

ACTIONS = ("up", "down", "left", "right", "stay")
N_ACTIONS = len(ACTIONS)
# (dx, dy) per action index
MOVES = np.array([(0, 1), (0, -1), (-1, 0), (1, 0), (0, 0)], dtype=np.int64)

DEFAULT_GOALS = {
    (0, 0): 0.515,
    (7, 7): 0.258,
    (3, 4): 0.129,
    (4, 3): 0.064,
    (1, 6): 0.031,
    (6, 1): 0.003,
}


@dataclass(frozen=True)
class GoalDistribution:
    support: tuple[tuple[tuple[int, int], float], ...]

    def __post_init__(self):
        if not self.support:
            raise ValueError("goal distribution needs at least one point")
        total = math.fsum(p for _, p in self.support)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        for (x, y), p in self.support:
            if not (0 <= x < GRID_SIZE and 0 <= y < GRID_SIZE):
                raise ValueError(f"goal {(x, y)} is off the grid")
            if p <= 0:
                raise ValueError(f"goal {(x, y)} has non-positive mass {p}")

    @classmethod
    def from_mapping(cls, mapping) -> "GoalDistribution":
        return cls(tuple((tuple(int(c) for c in xy), float(p)) for xy, p in mapping.items()))

    @classmethod
    def from_json(cls, path) -> "GoalDistribution":
        """``{"support": [[x, y], ...], "probabilities": [p, ...]}``"""
        data = json.loads(Path(path).read_text())
        return cls(tuple((tuple(xy), float(p)) for xy, p in zip(data["support"], data["probabilities"])))

    def to_json(self) -> dict:
        return {"support": [list(xy) for xy in self.goals], "probabilities": list(self.probabilities)}

    @property
    def goals(self) -> list[tuple[int, int]]:
        return [xy for xy, _ in self.support]

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p for _, p in self.support])

    @property
    def entropy_bits(self) -> float:
        p = self.probabilities
        return float(-np.sum(p * np.log2(p)))

    def probability_of(self, goal) -> float:
        return dict(self.support).get(tuple(goal), 0.0)

    def sample(self, rng: np.random.Generator, size=None):
        idx = rng.choice(len(self.support), size=size, p=self.probabilities)
        goals = np.array(self.goals, dtype=np.int64)
        return goals[idx]


def default_distribution() -> GoalDistribution:
    return GoalDistribution.from_mapping(DEFAULT_GOALS)


def normalize(pos) -> np.ndarray:
    return np.asarray(pos, dtype=np.float64) / (GRID_SIZE - 1)


def sample_start(goal, rng: np.random.Generator) -> np.ndarray:
    """Uniform cell excluding the goal."""
    cell = rng.integers(GRID_SIZE * GRID_SIZE - 1)
    goal_cell = int(goal[1]) * GRID_SIZE + int(goal[0])
    cell = cell + (cell >= goal_cell)
    return np.array([cell % GRID_SIZE, cell // GRID_SIZE], dtype=np.int64)


@dataclass
class EnvState:
    goal: tuple[int, int]
    listener_pos: tuple[int, int]
    t: int = 0
    done: bool = False
    success: bool = False
    grid_size: int = field(default=GRID_SIZE)


class EpisodeOver(RuntimeError):
    pass


class CommunicatingGoalEnv:
    def __init__(self, distribution: GoalDistribution | None = None):
        self.distribution = distribution or default_distribution()
        self.state: EnvState | None = None

    def reset(self, seed=None, goal=None):
        """Returns (state, speaker_obs, listener_obs)."""
        rng = np.random.default_rng(seed)
        g = np.asarray(goal if goal is not None else self.distribution.sample(rng), dtype=np.int64)
        pos = sample_start(g, rng)
        self.state = EnvState(tuple(int(c) for c in g), tuple(int(c) for c in pos))
        return self.state, normalize(g), normalize(pos)

    def observe(self):
        s = self.state
        return normalize(s.goal), normalize(s.listener_pos)

    def step(self, action: int):
        """Returns (state, reward, done)."""
        self.state, reward = step(self.state, action)
        return self.state, reward, self.state.done


def step(state: EnvState, action) -> tuple[EnvState, float]:
    if state.done:
        raise EpisodeOver("step() called on a finished episode")
    if isinstance(action, str):
        action = ACTIONS.index(action)
    dx, dy = MOVES[int(action)]
    x = min(max(state.listener_pos[0] + int(dx), 0), GRID_SIZE - 1)
    y = min(max(state.listener_pos[1] + int(dy), 0), GRID_SIZE - 1)
    t = state.t + 1
    success = (x, y) == state.goal
    done = success or t >= T_MAX
    reward = SUCCESS_REWARD if success else STEP_PENALTY
    return EnvState(state.goal, (x, y), t, done, success, state.grid_size), reward


def oracle_action(pos, goal) -> int:
    """Greedy Manhattan move towards ``goal`` (x first)."""
    dx = int(goal[0]) - int(pos[0])
    dy = int(goal[1]) - int(pos[1])
    if dx > 0:
        return ACTIONS.index("right")
    if dx < 0:
        return ACTIONS.index("left")
    if dy > 0:
        return ACTIONS.index("up")
    if dy < 0:
        return ACTIONS.index("down")
    return ACTIONS.index("stay")


class BatchEnv:
    """Vectorised copy of the same dynamics for ``n`` independent episodes."""

    def __init__(self, goals: np.ndarray, starts: np.ndarray):
        self.goals = np.asarray(goals, dtype=np.int64)
        self.pos = np.asarray(starts, dtype=np.int64).copy()
        n = len(self.goals)
        self.t = np.zeros(n, dtype=np.int64)
        self.done = np.zeros(n, dtype=bool)
        self.success = np.zeros(n, dtype=bool)

    def step(self, actions: np.ndarray) -> np.ndarray:
        """Advance the live episodes; returns per-episode reward (0 for finished ones)."""
        live = ~self.done
        moved = np.clip(self.pos + MOVES[actions], 0, GRID_SIZE - 1)
        self.pos = np.where(live[:, None], moved, self.pos)
        self.t = self.t + live
        hit = live & np.all(self.pos == self.goals, axis=1)
        reward = np.where(hit, SUCCESS_REWARD, STEP_PENALTY) * live
        self.success |= hit
        self.done |= hit | (self.t >= T_MAX)
        return reward
