"""Speaker -> channel -> listener training with a communication penalty.

Objective per batch of episodes (averaged over episodes)::

    total = policy_loss + lam * comms_loss
    policy_loss = -sum_t A_t log pi(a_t | pos_t, z_hat_t) - entropy_coef * H
    comms_loss  = sum over sent messages of sum_k log2(2|z_k|/delta + 1)

The listener's policy gradient reaches the speaker through ``z_hat``; the
channel contributes an identity Jacobian. The value baseline is a separate
critic fitted by squared error on discounted returns (REINFORCE with
baseline rather than PPO).

All per-episode randomness (goal, start cell, action sampling, channel noise)
is drawn from the counter-based hash keyed by the episode seed, so a batch of
episodes rolls out exactly like the same episodes run one at a time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import env as envmod
from .channel import CONVENTIONS, ROUND, grad_passthrough, quantize_array, reconstruct_array
from .loss import comms_cost_array, comms_cost_grad_array
from .nn import Adam, DenseNet, backward, forward, log_softmax, softmax
from .rng import derive_seed, hash_array, noise_array

log = logging.getLogger(__name__)

# edge_id values inside one episode's key space
NOISE_EDGE = 0  # speaker -> listener channel
ACTION_EDGE = 1
RESET_EDGE = 2

EVAL_STREAM = 0xE7A1
TRAIN_STREAM = 0x7A11


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 4e-3
    delta: float = 1.0
    episodes: int = 100_000
    lr: float = 1e-3
    seed: int = 1
    gamma: float = 0.99
    message_dims: int = 2
    bits: str = "ideal"
    hidden: int = 64
    hidden_layers: int = 2
    batch_episodes: int = 32
    entropy_coef: float = 0.01
    value_lr: float = 1e-3
    per_timestep: bool = True
    convention: str = ROUND
    eval_episodes: int = 2000
    grad_clip: float = 10.0
    # lam ramps linearly from 0 over this fraction of the episodes
    lam_warmup: float = 0.3

    def lam_at(self, episodes_seen: int) -> float:
        if self.lam_warmup <= 0:
            return self.lam
        ramp = episodes_seen / (self.lam_warmup * self.episodes)
        return self.lam * min(1.0, ramp)

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError("lam must be a finite non-negative number")
        if self.delta <= 0 or not math.isfinite(self.delta):
            raise ValueError("delta must be positive")
        for name in ("episodes", "message_dims", "hidden", "hidden_layers", "batch_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eval_episodes < 0:
            raise ValueError("eval_episodes must be >= 0")
        if self.lr <= 0 or self.value_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.bits not in ("ideal", "encoded"):
            raise ValueError("bits must be 'ideal' or 'encoded'")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Policies:
    speaker: DenseNet
    listener: DenseNet
    critic: DenseNet

    @classmethod
    def init(cls, config: TrainConfig) -> "Policies":
        rng = np.random.default_rng([config.seed, 0x5EED])
        hid = [config.hidden] * config.hidden_layers
        d = config.message_dims
        return cls(
            speaker=DenseNet.init([2, *hid, d], rng),
            listener=DenseNet.init([2 + d, *hid, envmod.N_ACTIONS], rng, out_scale=0.1),
            critic=DenseNet.init([5, *hid, 1], rng),
        )

    def nets(self) -> dict[str, DenseNet]:
        return {"speaker": self.speaker, "listener": self.listener, "critic": self.critic}


@dataclass
class EpisodeRecord:
    episode: int
    goal: tuple[int, int]
    steps: int
    success: bool
    ret: float
    messages: int
    ideal_bits_total: float
    encoded_bits_total: int
    surrogate_bits_total: float
    log: list = field(default_factory=list)  # [(z, m)] per sent message

    def bits(self, mode: str = "ideal") -> float:
        return self.ideal_bits_total if mode == "ideal" else float(self.encoded_bits_total)


@dataclass
class Rollout:
    """Arrays for ``n`` episodes over ``T`` steps; time-major."""

    episode_ids: np.ndarray
    seeds: np.ndarray
    goals: np.ndarray  # (n, 2)
    z: np.ndarray  # (n, d)
    speaker_tape: object
    listener_in: np.ndarray  # (T, n, 2 + d)
    critic_in: np.ndarray  # (T, n, 5)
    probs: np.ndarray  # (T, n, A)
    actions: np.ndarray  # (T, n)
    live: np.ndarray  # (T, n) bool
    sent: np.ndarray  # (T, n) bool, a message crossed the channel at t
    rewards: np.ndarray  # (T, n)
    m: np.ndarray  # (T, n, d)
    success: np.ndarray
    steps: np.ndarray

    @property
    def n(self) -> int:
        return len(self.episode_ids)


def _bit_length(n: np.ndarray) -> np.ndarray:
    return np.frexp(n.astype(np.float64))[1].astype(np.int64)


def encoded_bits_array(m: np.ndarray) -> np.ndarray:
    """Elias-gamma codeword length of zigzag(m) + 1, elementwise."""
    zz = np.where(m >= 0, 2 * m, -2 * m - 1)
    return 2 * (_bit_length(zz + 1) - 1) + 1


def ideal_bits_array(m: np.ndarray) -> np.ndarray:
    return np.log2(2.0 * np.abs(m) + 1.0)


def episode_seeds(base_seed: int, stream: int, ids) -> np.ndarray:
    return np.array([derive_seed(base_seed, stream, int(i)) for i in ids], dtype=np.uint64)


def _units(seeds: np.ndarray, edge: int, t: int, dim: int) -> np.ndarray:
    h = hash_array(seeds, edge, t, dim)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def sample_resets(seeds: np.ndarray, dist: envmod.GoalDistribution) -> tuple[np.ndarray, np.ndarray]:
    cdf = np.cumsum(dist.probabilities)
    idx = np.minimum(np.searchsorted(cdf, _units(seeds, RESET_EDGE, 0, 0), side="right"), len(cdf) - 1)
    goals = np.array(dist.goals, dtype=np.int64)[idx]
    cells = np.floor(_units(seeds, RESET_EDGE, 0, 1) * (envmod.GRID_SIZE**2 - 1)).astype(np.int64)
    goal_cells = goals[:, 1] * envmod.GRID_SIZE + goals[:, 0]
    cells = cells + (cells >= goal_cells)
    starts = np.stack([cells % envmod.GRID_SIZE, cells // envmod.GRID_SIZE], axis=1)
    return goals, starts


def _sample_actions(probs: np.ndarray, seeds: np.ndarray, t: int) -> np.ndarray:
    u = _units(seeds, ACTION_EDGE, t, 0)
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def _critic_input(goals, pos, t) -> np.ndarray:
    n = len(goals)
    return np.concatenate([envmod.normalize(goals), envmod.normalize(pos),
                           np.full((n, 1), t / envmod.T_MAX)], axis=1)


def rollout(policies: Policies, config: TrainConfig, episode_ids, seeds=None, *,
            greedy: bool = False, dist: envmod.GoalDistribution | None = None,
            speaker_override: Callable | None = None,
            listener_override: Callable | None = None) -> Rollout:
    """Play a batch of episodes.

    ``speaker_override(goals) -> z`` and ``listener_override(pos, z_hat) ->
    actions`` bypass the networks (oracle/debug runs).
    """
    dist = dist or envmod.default_distribution()
    episode_ids = np.asarray(episode_ids, dtype=np.int64)
    if seeds is None:
        seeds = episode_seeds(config.seed, TRAIN_STREAM, episode_ids)
    n = len(episode_ids)
    d = config.message_dims
    goals, starts = sample_resets(seeds, dist)
    if speaker_override is None:
        z, sp_tape = forward(policies.speaker, envmod.normalize(goals))
    else:
        z, sp_tape = np.asarray(speaker_override(goals), dtype=np.float64).reshape(n, d), None
    if not np.all(np.isfinite(z)):
        raise TrainingDiverged("speaker produced non-finite signals")
    env = envmod.BatchEnv(goals, starts)
    dims = np.arange(d, dtype=np.uint64)[None, :]

    L_in, C_in, P, ACT, LIVE, SENT, R, M = [], [], [], [], [], [], [], []
    z_hat = m = None
    for t in range(envmod.T_MAX):
        live = ~env.done
        if not live.any():
            break
        sent = live.copy() if (config.per_timestep or t == 0) else np.zeros(n, dtype=bool)
        if config.per_timestep or t == 0:
            eps = noise_array(seeds[:, None], NOISE_EDGE, t, dims, config.delta)
            m = quantize_array(z, eps, config.delta, config.convention)
            z_hat = reconstruct_array(m, eps, config.delta, config.convention)
        x = np.concatenate([envmod.normalize(env.pos), z_hat], axis=1)
        C_in.append(_critic_input(goals, env.pos, t))
        if listener_override is not None:
            actions = np.asarray(listener_override(env.pos, z_hat), dtype=np.int64)
            probs = np.eye(envmod.N_ACTIONS)[actions]
        else:
            probs = softmax(forward(policies.listener, x)[0])
            actions = np.argmax(probs, axis=1) if greedy else _sample_actions(probs, seeds, t)
        L_in.append(x)
        P.append(probs)
        ACT.append(actions)
        LIVE.append(live)
        SENT.append(sent)
        M.append(m)
        R.append(env.step(actions))

    stack = lambda xs, shape: np.stack(xs) if xs else np.zeros(shape)
    return Rollout(
        episode_ids=episode_ids,
        seeds=seeds,
        goals=goals,
        z=z,
        speaker_tape=sp_tape,
        listener_in=stack(L_in, (0, n, 2 + d)),
        critic_in=stack(C_in, (0, n, 5)),
        probs=stack(P, (0, n, envmod.N_ACTIONS)),
        actions=stack(ACT, (0, n)).astype(np.int64),
        live=stack(LIVE, (0, n)).astype(bool),
        sent=stack(SENT, (0, n)).astype(bool),
        rewards=stack(R, (0, n)),
        m=stack(M, (0, n, d)).astype(np.int64),
        success=env.success.copy(),
        steps=env.t.copy(),
    )


def _time_sum(a: np.ndarray) -> np.ndarray:
    # step-by-step accumulation: the result does not depend on the batch size
    total = np.zeros(a.shape[1:], dtype=a.dtype)
    for row in a:
        total = total + row
    return total


def records_from(ro: Rollout, config: TrainConfig, keep_log: bool = False) -> list[EpisodeRecord]:
    ideal = _time_sum(ideal_bits_array(ro.m).sum(axis=2) * ro.sent)
    encoded = _time_sum(encoded_bits_array(ro.m).sum(axis=2) * ro.sent)
    n_msgs = ro.sent.sum(axis=0)
    surrogate = comms_cost_array(ro.z, config.delta).sum(axis=1) * n_msgs
    returns = _time_sum(ro.rewards)
    out = []
    for i in range(ro.n):
        entry_log = []
        if keep_log:
            entry_log = [(ro.z[i].copy(), ro.m[t, i].copy()) for t in range(len(ro.sent)) if ro.sent[t, i]]
        out.append(EpisodeRecord(
            episode=int(ro.episode_ids[i]),
            goal=(int(ro.goals[i, 0]), int(ro.goals[i, 1])),
            steps=int(ro.steps[i]),
            success=bool(ro.success[i]),
            ret=float(returns[i]),
            messages=int(n_msgs[i]),
            ideal_bits_total=float(ideal[i]),
            encoded_bits_total=int(encoded[i]),
            surrogate_bits_total=float(surrogate[i]),
            log=entry_log,
        ))
    return out


def run_episode(policies: Policies, config: TrainConfig, episode_seed: int, *, greedy: bool = False,
                dist=None, speaker_override=None, listener_override=None) -> EpisodeRecord:
    ro = rollout(policies, config, [0], np.array([episode_seed], dtype=np.uint64), greedy=greedy,
                 dist=dist, speaker_override=speaker_override, listener_override=listener_override)
    return records_from(ro, config, keep_log=True)[0]


def oracle_speaker(goals) -> np.ndarray:
    """Sends raw goal coordinates (d = 2)."""
    return np.asarray(goals, dtype=np.float64)


def oracle_listener(pos, z_hat) -> np.ndarray:
    goals = np.clip(np.rint(z_hat[:, :2]), 0, envmod.GRID_SIZE - 1).astype(np.int64)
    return np.array([envmod.oracle_action(p, g) for p, g in zip(pos, goals)], dtype=np.int64)


# -- learning ------------------------------------------------------------------


@dataclass
class UpdateStats:
    policy_loss: float
    comms_loss: float
    total_loss: float
    value_loss: float
    comms_grad_norm: float
    entropy: float
    lam: float


def discounted_returns(rewards: np.ndarray, live: np.ndarray, gamma: float) -> np.ndarray:
    G = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1])
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running * live[t]
        G[t] = running * live[t]
    return G


def compute_gradients(policies: Policies, config: TrainConfig, ro: Rollout, lam: float | None = None):
    """Gradients of the batch objective for speaker, listener and critic."""
    lam = config.lam if lam is None else lam
    T, n = ro.live.shape
    d = config.message_dims
    mask = ro.live.astype(np.float64)
    G = discounted_returns(ro.rewards, ro.live, config.gamma)

    flat_c = ro.critic_in.reshape(T * n, -1)
    values, c_tape = forward(policies.critic, flat_c)
    values = values[:, 0].reshape(T, n)
    adv = (G - values) * mask
    v_err = (values - G) * mask
    value_loss = 0.5 * float((v_err**2).sum()) / n
    critic_grads, _ = backward(policies.critic, c_tape, (v_err / n).reshape(T * n, 1))

    flat_x = ro.listener_in.reshape(T * n, 2 + d)
    logits, l_tape = forward(policies.listener, flat_x)
    logp = log_softmax(logits)
    p = np.exp(logp)
    onehot = np.eye(envmod.N_ACTIONS)[ro.actions.reshape(-1)]
    a_flat = adv.reshape(-1)
    m_flat = mask.reshape(-1)
    chosen_logp = logp[np.arange(T * n), ro.actions.reshape(-1)]
    ent = -(p * logp).sum(axis=1)
    pg_loss = -float((a_flat * chosen_logp).sum()) / n
    ent_total = float((ent * m_flat).sum()) / n
    policy_loss = pg_loss - config.entropy_coef * ent_total

    dlogits = -(a_flat[:, None] / n) * (onehot - p)
    dlogits += (config.entropy_coef * m_flat / n)[:, None] * p * (logp + ent[:, None])
    listener_grads, dx = backward(policies.listener, l_tape, dlogits)

    # channel: d z_hat / d z = I; every z_hat in an episode comes from the same z
    dz_hat = grad_passthrough(dx[:, 2:].reshape(T, n, d))
    dz = dz_hat.sum(axis=0)

    n_msgs = ro.sent.sum(axis=0).astype(np.float64)
    comms_loss = float((comms_cost_array(ro.z, config.delta).sum(axis=1) * n_msgs).sum()) / n
    comms_grad = lam * n_msgs[:, None] * comms_cost_grad_array(ro.z, config.delta) / n
    dz = dz + comms_grad
    speaker_grads, _ = backward(policies.speaker, ro.speaker_tape, dz)

    stats = UpdateStats(
        policy_loss=policy_loss,
        comms_loss=comms_loss,
        total_loss=policy_loss + lam * comms_loss,
        lam=lam,
        value_loss=value_loss,
        comms_grad_norm=float(np.linalg.norm(comms_grad)),
        entropy=ent_total,
    )
    return speaker_grads, listener_grads, critic_grads, stats


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if not math.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient norm {norm}")
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads


def _check_finite(policies: Policies, update: int) -> None:
    for name, net in policies.nets().items():
        for i, p in enumerate(net.params()):
            if not np.all(np.isfinite(p)):
                raise TrainingDiverged(f"non-finite values in {name} parameter {i} after update {update}")


@dataclass
class TrainResult:
    policies: Policies
    config: TrainConfig
    episodes: list[dict]  # per-episode metrics rows
    updates: list[dict]  # per-update loss rows


def train(config: TrainConfig, dist: envmod.GoalDistribution | None = None, *,
          progress: Callable[[int, dict], None] | None = None) -> TrainResult:
    policies = Policies.init(config)
    opt_s = Adam(policies.speaker.params(), lr=config.lr)
    opt_l = Adam(policies.listener.params(), lr=config.lr)
    opt_c = Adam(policies.critic.params(), lr=config.value_lr)
    episode_rows: list[dict] = []
    update_rows: list[dict] = []
    start = 0
    update = 0
    while start < config.episodes:
        ids = np.arange(start, min(start + config.batch_episodes, config.episodes))
        ro = rollout(policies, config, ids, dist=dist)
        for rec in records_from(ro, config):
            episode_rows.append({
                "episode": rec.episode,
                "return": rec.ret,
                "success": int(rec.success),
                "ideal_bits": rec.ideal_bits_total,
                "encoded_bits": rec.encoded_bits_total,
            })
        gs, gl, gc, stats = compute_gradients(policies, config, ro, config.lam_at(start))
        opt_s.step(_clip(gs, config.grad_clip))
        opt_l.step(_clip(gl, config.grad_clip))
        opt_c.step(_clip(gc, config.grad_clip))
        _check_finite(policies, update)
        row = {"update": update, "episodes_seen": int(ids[-1]) + 1, **asdict(stats)}
        update_rows.append(row)
        if progress is not None:
            progress(update, row)
        update += 1
        start = int(ids[-1]) + 1
    return TrainResult(policies, config, episode_rows, update_rows)


def evaluate(policies: Policies, config: TrainConfig, n_episodes: int | None = None, *,
             dist=None, greedy: bool = True, keep_log: bool = False, chunk: int = 500) -> list[EpisodeRecord]:
    """Greedy-listener evaluation on a seed stream disjoint from training."""
    n_episodes = config.eval_episodes if n_episodes is None else n_episodes
    records = []
    for lo in range(0, n_episodes, chunk):
        ids = np.arange(lo, min(lo + chunk, n_episodes))
        seeds = episode_seeds(config.seed, EVAL_STREAM, ids)
        ro = rollout(policies, config, ids, seeds, greedy=greedy, dist=dist)
        records.extend(records_from(ro, config, keep_log=keep_log))
    return records


# -- lambda sweep ----------------------------------------------------------------


def sweep_lambda(lambdas, config: TrainConfig, seeds=None, *, dist=None,
                 on_run: Callable | None = None) -> list:
    """One training run per (lambda, seed); returns a RateDistortionPoint per lambda.

    A failing run is recorded on its point (``error``) and the sweep carries on.
    ``on_run(lam, seed, result, records)`` sees every finished run.
    """
    from dataclasses import replace

    from .analysis import RateDistortionPoint, shannon_gap

    lambdas = [float(l) for l in lambdas]
    if len(lambdas) < 2:
        raise ValueError("a sweep needs at least two lambda values")
    dist = dist or envmod.default_distribution()
    seeds = tuple(seeds) if seeds else (config.seed,)
    points = []
    for lam in lambdas:
        bits, enc, succ, errors = [], [], [], []
        for seed in seeds:
            cfg = replace(config, lam=lam, seed=seed)
            try:
                result = train(cfg, dist)
                records = evaluate(result.policies, cfg, dist=dist)
            except (TrainingDiverged, OverflowError, FloatingPointError) as exc:
                log.warning("sweep point lam=%g seed=%d failed: %s", lam, seed, exc)
                errors.append(f"seed {seed}: {exc}")
                continue
            bits.append(float(np.mean([r.ideal_bits_total for r in records])))
            enc.append(float(np.mean([r.encoded_bits_total for r in records])))
            succ.append(float(np.mean([r.success for r in records])))
            if on_run is not None:
                on_run(lam, seed, result, records)
        if bits:
            mean_bits = float(np.mean(bits))
            rate = mean_bits if config.bits == "ideal" else float(np.mean(enc))
            points.append(RateDistortionPoint(lam, mean_bits, float(np.mean(succ)),
                                              shannon_gap(rate, dist.entropy_bits), float(np.mean(enc)),
                                              seeds, "; ".join(errors)))
        else:
            nan = float("nan")
            points.append(RateDistortionPoint(lam, nan, nan, nan, nan, seeds, "; ".join(errors)))
    return points
