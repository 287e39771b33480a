"""DQN insider attacker trained inside the learned world model.

The surrogate environment replaces scripted agents with ``surrogate_step``;
the attacker's action is the position it declares next. Training is vanilla
DQN (replay buffer, periodically synced target network, linearly annealed
epsilon) over a batch of synchronous surrogate environments. The greedy policy
is then deployed against the scripted environment.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import (BENIGN_TYPES, AttackerObservation, EnvConfig, Personality, RewardConfig, Trajectory,
                  run_episode)
from .nn_core import Adam, LinearSchedule, ModelParams, Module, TrainingError, mlp, mse
from .classifier import infer_personalities
from .policies import DEFAULT_PARAMS, PHRASE_POOLS, MeanFollowingAttacker, render_message, scripted_agents
from .world_model import WorldModel, surrogate_step

log = logging.getLogger(__name__)

Q_DIVERGENCE = 1e4


@dataclass(frozen=True)
class DqnConfig:
    hidden: tuple[int, ...] = (256, 256)
    gamma: float = 0.99
    lr: float = 1e-5
    buffer_size: int = 100_000
    learning_starts: int = 10_000
    target_update_every: int = 1000
    batch_size: int = 128
    total_steps: int = 200_000
    n_parallel_envs: int = 8
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_fraction: float = 0.5
    eval_every: int = 10_000
    eval_episodes: int = 50

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.learning_starts >= self.total_steps:
            raise ValueError("learning_starts must be below total_steps")
        if self.buffer_size < self.batch_size:
            raise ValueError("buffer_size must be at least batch_size")
        for name in ("lr", "target_update_every", "batch_size", "total_steps", "n_parallel_envs",
                     "eval_every", "eval_episodes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.epsilon_fraction <= 1:
            raise ValueError("epsilon_fraction must be in (0, 1]")


def state_dim(n_benign: int) -> int:
    return n_benign + n_benign * len(BENIGN_TYPES) + 2


def encode_states(benign_positions: np.ndarray, benign_personalities: np.ndarray, own_previous: np.ndarray,
                  t: np.ndarray, L: int, T: int) -> np.ndarray:
    """Flat attacker state; benign agents ordered by (personality id, position)."""
    pos = np.atleast_2d(np.asarray(benign_positions, np.int64))
    pers = np.atleast_2d(np.asarray(benign_personalities, np.int64))
    order = np.argsort(pers * (L + 1) + pos, axis=1, kind="stable")
    pos = np.take_along_axis(pos, order, 1)
    pers = np.take_along_axis(pers, order, 1)
    B, n = pos.shape
    onehot = np.zeros((B, n, len(BENIGN_TYPES)), np.float32)
    np.put_along_axis(onehot, pers[..., None], 1.0, axis=2)
    return np.concatenate([
        pos / L, onehot.reshape(B, -1),
        (np.atleast_1d(own_previous) / L)[:, None], (np.atleast_1d(t) / T)[:, None],
    ], axis=1).astype(np.float32)


class QNetwork(Module):
    def __init__(self, in_dim: int, n_actions: int, hidden: Sequence[int] = (256, 256), seed: int = 0) -> None:
        super().__init__()
        self.in_dim, self.n_actions, self.hidden = in_dim, n_actions, tuple(hidden)
        self.net = mlp([in_dim, *hidden, n_actions], np.random.default_rng(seed))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)

    def backward(self, dout: np.ndarray) -> None:
        self.net.backward(dout)

    def hyperparameters(self) -> dict:
        return {"in_dim": self.in_dim, "n_actions": self.n_actions, "hidden": list(self.hidden)}

    def snapshot(self) -> ModelParams:
        return ModelParams.from_module("qnet", self.hyperparameters(), self)

    @classmethod
    def from_params(cls, params: ModelParams) -> "QNetwork":
        hp = params.hyperparameters
        return params.load_into(cls(hp["in_dim"], hp["n_actions"], hp["hidden"])).eval()

    def copy(self) -> "QNetwork":
        other = QNetwork(self.in_dim, self.n_actions, self.hidden)
        other.load_parameters(self.parameters())
        return other.eval()


def greedy_actions(q_values: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest action."""
    return np.argmax(q_values, axis=-1)


def act_epsilon_greedy(qnet: QNetwork, states: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must be in [0, 1]")
    states = np.atleast_2d(states)
    n = states.shape[0]
    explore = rng.random(n) < epsilon
    random_actions = rng.integers(0, qnet.n_actions, n)
    greedy = greedy_actions(qnet.forward(states)) if not explore.all() else random_actions
    return np.where(explore, random_actions, greedy)


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transitions are overwritten first."""

    def __init__(self, capacity: int, state_dim: int) -> None:
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim), np.float32)
        self.next_states = np.zeros((capacity, state_dim), np.float32)
        self.actions = np.zeros(capacity, np.int64)
        self.rewards = np.zeros(capacity, np.float32)
        self.dones = np.zeros(capacity, np.float32)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, states, actions, rewards, next_states, dones) -> None:
        for s, a, r, s2, d in zip(states, actions, rewards, next_states, dones):
            i = self.cursor
            self.states[i], self.actions[i], self.rewards[i] = s, a, r
            self.next_states[i], self.dones[i] = s2, d
            self.cursor = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from a buffer of {self.size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {"states": self.states[idx], "actions": self.actions[idx], "rewards": self.rewards[idx],
                "next_states": self.next_states[idx], "dones": self.dones[idx], "indices": idx}


def td_targets(target_net: QNetwork, rewards: np.ndarray, next_states: np.ndarray, dones: np.ndarray,
               gamma: float) -> np.ndarray:
    nxt = target_net.forward(next_states).max(axis=1)
    return (rewards + gamma * (1.0 - dones) * nxt).astype(np.float32)


def td_update(qnet: QNetwork, target_net: QNetwork, batch: dict[str, np.ndarray], gamma: float, optimizer: Adam,
              step: int = 0, grads: dict | None = None) -> float:
    y = td_targets(target_net, batch["rewards"], batch["next_states"], batch["dones"], gamma)
    qnet.zero_grad()
    q = qnet.forward(batch["states"])
    rows = np.arange(len(y))
    loss, dq_sa = mse(q[rows, batch["actions"]], y)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite TD loss at update {step}")
    dq = np.zeros_like(q)
    dq[rows, batch["actions"]] = dq_sa
    qnet.backward(dq)
    optimizer.step(grads if grads is not None else qnet.gradients())
    return loss


class SurrogateEnv:
    """Batch of synchronous episodes whose benign dynamics come from a world model.

    Episodes start from uniform random benign positions (redrawn while all are
    equal, since such a start is already a consensus), i.i.d. personalities and
    a random previous attacker position. A step ends an episode on consensus of
    the rounded predictions or when t reaches T; finished slots restart.
    """

    def __init__(self, model: WorldModel, n_envs: int, env_config: EnvConfig, reward: RewardConfig,
                 rng: np.random.Generator) -> None:
        self.model, self.n, self.cfg, self.reward, self.rng = model, n_envs, env_config, reward, rng
        nb = env_config.n_benign
        self.pos = np.zeros((n_envs, nb), np.int64)
        self.pers = np.zeros((n_envs, nb), np.int64)
        self.prev = np.zeros(n_envs, np.int64)
        self.t = np.zeros(n_envs, np.int64)
        self.returns = np.zeros(n_envs)
        self._reset(np.ones(n_envs, bool))

    def _reset(self, mask: np.ndarray) -> None:
        L, nb = self.cfg.L, self.cfg.n_benign
        for i in np.flatnonzero(mask):
            pos = self.rng.integers(0, L + 1, nb)
            while np.all(pos == pos[0]):
                pos = self.rng.integers(0, L + 1, nb)
            self.pos[i] = pos
            self.pers[i] = self.rng.integers(0, len(BENIGN_TYPES), nb)
            self.prev[i] = self.rng.integers(0, L + 1)
            self.t[i] = 0
            self.returns[i] = 0.0

    def states(self) -> np.ndarray:
        return encode_states(self.pos, self.pers, self.prev, self.t, self.cfg.L, self.cfg.T)

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, list[float]]:
        """Advance every slot. Returns (next_states, rewards, dones, consensus, finished returns)."""
        actions = np.asarray(actions, np.int64)
        if np.any(actions < 0) or np.any(actions > self.cfg.L):
            raise ValueError("attacker actions must lie in [0, L]")
        self.pos = surrogate_step(self.model, self.pos, self.pers, actions).reshape(self.n, -1)
        self.prev = actions.copy()
        self.t = self.t + 1
        delta = self.pos.max(axis=1) - self.pos.min(axis=1)
        consensus = delta <= self.cfg.consensus_tolerance
        rewards = np.zeros(self.n, np.float32)
        if self.reward.disagreement_reward:
            rewards += (delta > 0).astype(np.float32)
        if self.reward.use_consensus_penalty:
            rewards += np.where(consensus, self.reward.consensus_penalty, 0.0).astype(np.float32)
        dones = consensus | (self.t >= self.cfg.T)
        next_states = self.states()
        self.returns += rewards
        finished = [float(r) for r in self.returns[dones]]
        self._reset(dones)
        return next_states, rewards, dones, consensus, finished


def evaluate_surrogate(model: WorldModel, policy, n_episodes: int, env_config: EnvConfig, reward: RewardConfig,
                       seed: int) -> dict:
    """Run ``n_episodes`` surrogate episodes in lockstep.

    ``policy(states, rng) -> actions``. Initial states depend only on ``seed``,
    so two policies evaluated with the same seed face the same starts.
    """
    init_rng = np.random.default_rng([seed, 0])
    policy_rng = np.random.default_rng([seed, 1])
    env = SurrogateEnv(model, n_episodes, env_config, reward, init_rng)
    returns = np.zeros(n_episodes)
    active = np.ones(n_episodes, bool)
    consensus = np.zeros(n_episodes, bool)
    for _ in range(env_config.T):
        actions = np.asarray(policy(env.states(), policy_rng))
        _, rewards, dones, cons, _ = env.step(actions)
        returns += np.where(active, rewards, 0.0)
        consensus |= active & cons
        active &= ~dones
        if not active.any():
            break
    return {"mean_return": float(returns.mean()), "consensus_rate": float(consensus.mean()),
            "returns": returns}


def greedy_policy(qnet: QNetwork):
    return lambda states, rng: greedy_actions(qnet.forward(states))


def random_policy(L: int):
    return lambda states, rng: rng.integers(0, L + 1, len(states))


@dataclass
class TrainingResult:
    qnet: QNetwork
    final_qnet: QNetwork
    curve: list[dict] = field(default_factory=list)
    best_step: int = 0


def train_attacker(model: WorldModel, config: DqnConfig = DqnConfig(), env_config: EnvConfig = EnvConfig(),
                   reward: RewardConfig = RewardConfig(), seed: int = 0) -> TrainingResult:
    """Train a Q-network on surrogate rollouts.

    ``total_steps`` counts environment transitions summed over the parallel
    environments; one TD update follows each synchronous step once
    ``learning_starts`` transitions are stored. The returned ``qnet`` is the
    evaluation checkpoint with the lowest surrogate consensus rate.
    """
    ss = np.random.SeedSequence(seed)
    env_rng, act_rng, buf_rng, net_seed, eval_seed = (np.random.default_rng(s) for s in ss.spawn(5))
    env = SurrogateEnv(model.eval(), config.n_parallel_envs, env_config, reward, env_rng)
    n_actions = env_config.L + 1
    qnet = QNetwork(state_dim(env_config.n_benign), n_actions, config.hidden, seed=int(net_seed.integers(2**31)))
    target = qnet.copy()
    opt = Adam(qnet.parameters(), config.lr)
    grads = qnet.gradients()
    buffer = ReplayBuffer(config.buffer_size, qnet.in_dim)
    eps = LinearSchedule(config.epsilon_start, config.epsilon_end, config.total_steps, config.epsilon_fraction)
    eval_base = int(eval_seed.integers(2**31))

    curve: list[dict] = []
    recent: list[float] = []
    best = (math.inf, -math.inf)
    best_state, best_step = {k: p.copy() for k, p in qnet.parameters().items()}, 0
    updates, transitions, next_eval = 0, 0, config.eval_every
    states = env.states()
    while transitions < config.total_steps:
        epsilon = eps.value(transitions)
        actions = act_epsilon_greedy(qnet, states, epsilon, act_rng)
        next_states, rewards, dones, _, finished = env.step(actions)
        buffer.add(states, actions, rewards, next_states, dones.astype(np.float32))
        recent.extend(finished)
        states = env.states()
        transitions += config.n_parallel_envs
        if transitions >= config.learning_starts:
            qnet.train()
            td_update(qnet, target, buffer.sample(config.batch_size, buf_rng), config.gamma, opt, updates, grads)
            updates += 1
            if updates % config.target_update_every == 0:
                target.load_parameters(qnet.parameters())
        if transitions >= next_eval or transitions >= config.total_steps:
            next_eval += config.eval_every
            q_probe = qnet.forward(states)
            if not np.all(np.abs(q_probe) < Q_DIVERGENCE):
                raise TrainingError(f"Q-values diverged (|Q| >= {Q_DIVERGENCE:g}) at step {transitions}")
            ev = evaluate_surrogate(model, greedy_policy(qnet), config.eval_episodes, env_config, reward, eval_base)
            row = {"step": transitions, "epsilon": epsilon,
                   "mean_return": float(np.mean(recent)) if recent else float("nan"),
                   "eval_return": ev["mean_return"], "surrogate_cr": ev["consensus_rate"]}
            curve.append(row)
            recent = []
            log.info("dqn step %d eps %.3f return %.3f eval %.3f CR %.3f", transitions, epsilon,
                     row["mean_return"], ev["mean_return"], ev["consensus_rate"])
            key = (ev["consensus_rate"], -ev["mean_return"])
            if transitions >= config.learning_starts and key < best:
                best = key
                best_state, best_step = {k: p.copy() for k, p in qnet.parameters().items()}, transitions
    final = qnet.copy()
    qnet.load_parameters(best_state)
    return TrainingResult(qnet.eval(), final, curve, best_step)


def write_curve_csv(path: str | Path, curve: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epsilon", "mean_return", "eval_return", "surrogate_CR"])
        for r in curve:
            w.writerow([r["step"], f"{r['epsilon']:.4f}", f"{r['mean_return']:.4f}", f"{r['eval_return']:.4f}",
                        f"{r['surrogate_cr']:.4f}"])
    return path


class RLAttacker:
    """Greedy Q-policy backend for the scripted environment.

    ``personalities`` overrides what the attacker believes about the benign
    agents; by default it reads them from the observation.
    """

    def __init__(self, qnet: QNetwork, personalities: Sequence[Personality] | None = None) -> None:
        self.qnet = qnet.eval()
        self.personalities = None if personalities is None else tuple(personalities)

    def act(self, obs: AttackerObservation, rng):
        pers = self.personalities if self.personalities is not None else obs.neighbor_personalities
        state = encode_states(np.array(obs.neighbor_positions), np.array([int(p) for p in pers]),
                              np.array([obs.own_position]), np.array([obs.t]), obs.L, obs.T)
        pos = int(greedy_actions(self.qnet.forward(state))[0])
        return render_message(Personality.MALICIOUS, pos, rng, PHRASE_POOLS), pos


@dataclass
class Deployment:
    trajectories: list[Trajectory]
    believed_personalities: tuple[Personality, ...]
    profiling: Trajectory | None = None


def deploy_attacker(qnet: QNetwork, personalities: Sequence[Personality], env_config: EnvConfig,
                    seeds: Sequence[int], attribute_source: str = "true", classifier=None,
                    profiling_seed: int | None = None, personality_params=None) -> Deployment:
    """Play one scored episode per seed with the greedy attacker.

    With ``attribute_source="inferred"`` a profiling episode is played first
    with a mean-following attacker, and the classifier's per-agent predictions
    replace the true personalities in the attacker's state.
    """
    params = personality_params or DEFAULT_PARAMS
    profiling = None
    if attribute_source == "true":
        believed = tuple(personalities)
    elif attribute_source == "inferred":
        if classifier is None:
            raise ValueError("inferred attribute source needs a trained classifier")
        if profiling_seed is None:
            raise ValueError("inferred attribute source needs a profiling seed")
        profiling = run_episode(env_config, scripted_agents(personalities, params), personalities,
                                [MeanFollowingAttacker()], seed=profiling_seed, episode_id=-1)
        believed = infer_personalities(classifier, profiling, range(env_config.n_benign))
    else:
        raise ValueError(f"unknown attribute source {attribute_source!r}")
    attacker = RLAttacker(qnet, believed)
    trajs = [run_episode(env_config, scripted_agents(personalities, params), personalities, [attacker],
                         seed=s, episode_id=i) for i, s in enumerate(seeds)]
    return Deployment(trajs, believed, profiling)
