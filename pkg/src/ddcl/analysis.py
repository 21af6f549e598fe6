"""Post-hoc analysis: per-goal bit allocation, rate-distortion points, Shannon gap."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sstats

from . import env as envmod
from .channel import FLOOR
from .loss import comms_cost_array


@dataclass
class GoalStats:
    goal: tuple[int, int]
    frequency: float
    episodes: int
    success_rate: float
    mean_bits_per_episode: float
    mean_bits_per_message: float
    mean_encoded_bits_per_episode: float
    mean_surrogate_bits_per_episode: float
    mean_steps: float


@dataclass
class ProtocolReport:
    per_goal: list[GoalStats]
    pearson_r: float  # frequency vs mean bits per message
    pearson_r_per_episode: float
    covered_goals: int
    flags: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.flags

    def goal(self, xy) -> GoalStats:
        for g in self.per_goal:
            if g.goal == tuple(xy):
                return g
        raise KeyError(xy)


def _pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(sstats.pearsonr(x, y)[0])


def analyze_protocol(records, dist: envmod.GoalDistribution | None = None,
                     min_goals: int = 5) -> ProtocolReport:
    """Per-goal bit statistics and the frequency/bits correlation."""
    dist = dist or envmod.default_distribution()
    by_goal: dict[tuple[int, int], list] = {}
    for rec in records:
        by_goal.setdefault(tuple(rec.goal), []).append(rec)
    per_goal = []
    for goal in dist.goals:
        recs = by_goal.get(goal)
        if not recs:
            continue
        msgs = sum(r.messages for r in recs)
        per_goal.append(GoalStats(
            goal=goal,
            frequency=dist.probability_of(goal),
            episodes=len(recs),
            success_rate=float(np.mean([r.success for r in recs])),
            mean_bits_per_episode=float(np.mean([r.ideal_bits_total for r in recs])),
            mean_bits_per_message=math.fsum(r.ideal_bits_total for r in recs) / msgs if msgs else 0.0,
            mean_encoded_bits_per_episode=float(np.mean([r.encoded_bits_total for r in recs])),
            mean_surrogate_bits_per_episode=float(np.mean([r.surrogate_bits_total for r in recs])),
            mean_steps=float(np.mean([r.steps for r in recs])),
        ))
    flags = []
    if len(per_goal) < min_goals:
        flags.append(f"insufficient coverage: {len(per_goal)} of {len(dist.goals)} goals observed")
    freq = [g.frequency for g in per_goal]
    r_ep = _pearson(freq, [g.mean_bits_per_episode for g in per_goal])
    r_msg = _pearson(freq, [g.mean_bits_per_message for g in per_goal])
    if math.isnan(r_msg):
        flags.append("correlation undefined (zero variance)")
    return ProtocolReport(per_goal, r_msg, r_ep, len(per_goal), flags)


def pooled_report(reports: Sequence[ProtocolReport]) -> ProtocolReport:
    """Average per-goal statistics over several runs (e.g. seeds), then correlate."""
    goals = {}
    for rep in reports:
        for g in rep.per_goal:
            goals.setdefault(g.goal, []).append(g)
    per_goal = []
    for goal, gs in goals.items():
        avg = lambda attr: float(np.mean([getattr(g, attr) for g in gs]))
        per_goal.append(GoalStats(
            goal=goal,
            frequency=gs[0].frequency,
            episodes=sum(g.episodes for g in gs),
            success_rate=avg("success_rate"),
            mean_bits_per_episode=avg("mean_bits_per_episode"),
            mean_bits_per_message=avg("mean_bits_per_message"),
            mean_encoded_bits_per_episode=avg("mean_encoded_bits_per_episode"),
            mean_surrogate_bits_per_episode=avg("mean_surrogate_bits_per_episode"),
            mean_steps=avg("mean_steps"),
        ))
    per_goal.sort(key=lambda g: -g.frequency)
    freq = [g.frequency for g in per_goal]
    r_ep = _pearson(freq, [g.mean_bits_per_episode for g in per_goal])
    r_msg = _pearson(freq, [g.mean_bits_per_message for g in per_goal])
    flags = [f for rep in reports for f in rep.flags]
    return ProtocolReport(per_goal, r_msg, r_ep, len(per_goal), flags)


def expected_ideal_bits(z, delta: float, convention: str = FLOOR) -> np.ndarray:
    """Exact E[log2(2|m|+1)] over the dither, elementwise in ``z``.

    ``z'`` is uniform on a width-``delta`` interval, so ``m`` takes at most two
    adjacent values; their probabilities are the overlaps with each bin.
    """
    z = np.asarray(z, dtype=np.float64)
    lo = z / delta - 0.5 + (0.5 if convention != FLOOR else 0.0)
    a = np.floor(lo)
    p_hi = lo - a  # mass of z'/delta landing in [a + 1, lo + 1)
    bits = lambda m: np.log2(2.0 * np.abs(m) + 1.0)
    return (1.0 - p_hi) * bits(a) + p_hi * bits(a + 1.0)


def protocol_heatmap(speaker, delta: float, convention: str = FLOOR) -> np.ndarray:
    """Expected ideal bits per message for every goal cell; ``[y, x]`` indexing."""
    xs, ys = np.meshgrid(np.arange(envmod.GRID_SIZE), np.arange(envmod.GRID_SIZE))
    cells = np.stack([xs.ravel(), ys.ravel()], axis=1)
    z = speaker(envmod.normalize(cells))
    bits = expected_ideal_bits(z, delta, convention).sum(axis=1)
    return bits.reshape(envmod.GRID_SIZE, envmod.GRID_SIZE)


def surrogate_heatmap(speaker, delta: float) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(envmod.GRID_SIZE), np.arange(envmod.GRID_SIZE))
    cells = np.stack([xs.ravel(), ys.ravel()], axis=1)
    z = speaker(envmod.normalize(cells))
    return comms_cost_array(z, delta).sum(axis=1).reshape(envmod.GRID_SIZE, envmod.GRID_SIZE)


@dataclass
class RateDistortionPoint:
    lam: float
    mean_bits_per_episode: float
    success_rate: float
    shannon_gap: float
    mean_encoded_bits_per_episode: float = float("nan")
    seeds: tuple[int, ...] = ()
    error: str = ""

    @property
    def distortion(self) -> float:
        return 1.0 - self.success_rate


def shannon_gap(mean_bits: float, entropy_bits: float) -> float:
    return mean_bits - entropy_bits


def spearman(x, y) -> float:
    return float(sstats.spearmanr(x, y)[0])
