"""One-dimensional multi-round consensus environment.

Agents hold integer positions on {0..L}. Round 0 is the random initial
placement; every later round is a synchronous update in which each benign
agent reads the previous round's positions and messages. Consensus is judged
over benign agents only: the episode ends when their spread drops to the
tolerance, or after T update rounds (a failure).

Insider declarations are published before benign agents finalise a round:
the attacker picks its position for round t+1 after seeing round t, and the
benign updates that produce round t+1 already see that declaration.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np

TRAJECTORY_FORMAT_VERSION = 1


class Personality(enum.IntEnum):
    STUBBORN = 0
    SUGGESTIBLE = 1
    NEUTRAL = 2
    MALICIOUS = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | Personality") -> "Personality":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(value)


BENIGN_TYPES = (Personality.STUBBORN, Personality.SUGGESTIBLE, Personality.NEUTRAL)


@dataclass(frozen=True)
class EnvConfig:
    L: int = 20
    T: int = 10
    n_benign: int = 3
    n_malicious: int = 1
    consensus_tolerance: float = 0.0
    full_visibility: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.L < 1 or self.T < 1:
            raise ValueError("L and T must be at least 1")
        if self.n_benign < 2:
            raise ValueError("need at least two benign agents")
        if self.n_malicious < 0 or self.consensus_tolerance < 0:
            raise ValueError("n_malicious and consensus_tolerance must be nonnegative")
        if not self.full_visibility:
            raise NotImplementedError("only the fully connected visibility graph is implemented")

    @property
    def n_agents(self) -> int:
        return self.n_benign + self.n_malicious


@dataclass(frozen=True)
class AgentEntry:
    id: int
    personality: Personality
    position: int
    message: tuple[str, ...] = ()


@dataclass(frozen=True)
class RoundRecord:
    t: int
    agents: tuple[AgentEntry, ...]
    delta: float
    consensus: bool

    @property
    def positions(self) -> list[int]:
        return [a.position for a in self.agents]

    @property
    def benign_positions(self) -> list[int]:
        return [a.position for a in self.agents if a.personality != Personality.MALICIOUS]

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "agents": [{"id": a.id, "personality": a.personality.label, "position": a.position,
                        "message_tokens": list(a.message)} for a in self.agents],
            "delta": self.delta,
            "consensus": self.consensus,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RoundRecord":
        agents = tuple(AgentEntry(a["id"], Personality.parse(a["personality"]), int(a["position"]),
                                  tuple(a["message_tokens"])) for a in doc["agents"])
        return cls(int(doc["t"]), agents, float(doc["delta"]), bool(doc["consensus"]))


@dataclass
class Trajectory:
    episode_id: int
    config: EnvConfig
    rounds: list[RoundRecord]
    consensus_round: int | None
    seed: int
    clamp_events: int = 0

    @property
    def consensus(self) -> bool:
        return self.consensus_round is not None

    @property
    def rounds_used(self) -> int:
        """Update rounds until consensus; failures count the full horizon."""
        return self.consensus_round if self.consensus else self.config.T

    @property
    def personalities(self) -> list[Personality]:
        return [a.personality for a in self.rounds[0].agents]

    def positions_of(self, agent_id: int) -> list[int]:
        return [r.agents[agent_id].position for r in self.rounds]

    def messages_of(self, agent_id: int) -> list[tuple[str, ...]]:
        return [r.agents[agent_id].message for r in self.rounds[1:]]

    def to_json(self) -> dict:
        return {
            "format_version": TRAJECTORY_FORMAT_VERSION,
            "episode_id": self.episode_id,
            "config": asdict(self.config),
            "rounds": [r.to_json() for r in self.rounds],
            "outcome": {"consensus": self.consensus, "consensus_round": self.consensus_round,
                        "rounds": self.rounds_used},
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Trajectory":
        if doc.get("format_version") != TRAJECTORY_FORMAT_VERSION:
            raise ValueError(f"unsupported trajectory format_version {doc.get('format_version')!r}")
        return cls(
            episode_id=int(doc["episode_id"]),
            config=EnvConfig(**doc["config"]),
            rounds=[RoundRecord.from_json(r) for r in doc["rounds"]],
            consensus_round=doc["outcome"]["consensus_round"],
            seed=int(doc["seed"]),
        )


@dataclass(frozen=True)
class AgentObservation:
    """What a benign agent sees when choosing its next position."""

    agent_id: int
    own_position: int
    neighbor_positions: tuple[int, ...]
    neighbor_messages: tuple[tuple[str, ...], ...]
    t: int
    L: int


@dataclass(frozen=True)
class AttackerObservation:
    own_position: int
    neighbor_positions: tuple[int, ...]
    neighbor_personalities: tuple[Personality, ...]
    t: int
    L: int
    T: int


Action = tuple[Sequence[str], int]


class AgentBackend(Protocol):
    """Anything that maps an observation to a (message tokens, position) pair."""

    def act(self, observation, rng: np.random.Generator) -> Action: ...


@dataclass(frozen=True)
class RewardConfig:
    disagreement_reward: bool = True
    consensus_penalty: float = -10.0
    use_consensus_penalty: bool = True


def disagreement(benign_positions: Sequence[float]) -> float:
    """Maximum pairwise absolute difference; equals max - min on the line."""
    if len(benign_positions) < 2:
        raise ValueError("disagreement needs at least two benign agents")
    return float(max(benign_positions) - min(benign_positions))


def attacker_reward(record: RoundRecord, terminated_by_consensus: bool,
                    reward: RewardConfig = RewardConfig()) -> float:
    r = 0.0
    if reward.disagreement_reward and record.delta > 0:
        r += 1.0
    if reward.use_consensus_penalty and terminated_by_consensus:
        r += reward.consensus_penalty
    return r


class ConsensusEnv:
    """Single-episode state machine. Agents 0..n_benign-1 are benign, the rest malicious."""

    def __init__(self, config: EnvConfig) -> None:
        self.config = config
        self.rounds: list[RoundRecord] = []
        self.personalities: list[Personality] = []
        self.clamp_events = 0
        self.done = False
        self.consensus_round: int | None = None

    @property
    def record(self) -> RoundRecord:
        return self.rounds[-1]

    def reset(self, benign_personalities: Sequence[Personality], rng: np.random.Generator) -> RoundRecord:
        cfg = self.config
        if len(benign_personalities) != cfg.n_benign:
            raise ValueError(f"expected {cfg.n_benign} benign personalities, got {len(benign_personalities)}")
        if any(p == Personality.MALICIOUS for p in benign_personalities):
            raise ValueError("benign agents cannot be malicious")
        self.personalities = list(benign_personalities) + [Personality.MALICIOUS] * cfg.n_malicious
        positions = [int(rng.integers(0, cfg.L + 1)) for _ in range(cfg.n_agents)]
        self.clamp_events = 0
        self.consensus_round = None
        self.rounds = [self._make_record(0, positions, [()] * cfg.n_agents)]
        self.done = self.record.consensus
        if self.done:
            self.consensus_round = 0
        return self.record

    def _make_record(self, t: int, positions: list[int], messages: list) -> RoundRecord:
        agents = tuple(AgentEntry(i, p, pos, tuple(msg))
                       for i, (p, pos, msg) in enumerate(zip(self.personalities, positions, messages)))
        benign = positions[:self.config.n_benign]
        delta = disagreement(benign)
        return RoundRecord(t, agents, delta, delta <= self.config.consensus_tolerance)

    def _clamp(self, pos) -> int:
        p = int(pos)
        if p < 0 or p > self.config.L:
            self.clamp_events += 1
            p = min(max(p, 0), self.config.L)
        return p

    def benign_observation(self, agent_id: int, declarations: Sequence[Action] = ()) -> AgentObservation:
        """View of ``agent_id`` for the next update; ``declarations`` override malicious slots."""
        rec = self.record
        positions = rec.positions
        messages = [a.message for a in rec.agents]
        for k, (tokens, pos) in enumerate(declarations):
            slot = self.config.n_benign + k
            positions[slot] = min(max(int(pos), 0), self.config.L)
            messages[slot] = tuple(tokens)
        others = [j for j in range(self.config.n_agents) if j != agent_id]
        return AgentObservation(agent_id, positions[agent_id], tuple(positions[j] for j in others),
                                tuple(messages[j] for j in others), rec.t, self.config.L)

    def attacker_observation(self, attacker_index: int = 0,
                             personalities: Sequence[Personality] | None = None) -> AttackerObservation:
        rec = self.record
        slot = self.config.n_benign + attacker_index
        benign = rec.benign_positions
        pers = tuple(self.personalities[:self.config.n_benign] if personalities is None else personalities)
        return AttackerObservation(rec.agents[slot].position, tuple(benign), pers, rec.t,
                                   self.config.L, self.config.T)

    def step(self, benign_actions: Sequence[Action], attacker_actions: Sequence[Action] = ()) -> tuple[RoundRecord, bool]:
        """Commit one synchronous round. Returns the new record and whether the episode ended."""
        if self.done:
            raise RuntimeError("step called on a finished episode")
        cfg = self.config
        if len(benign_actions) != cfg.n_benign or len(attacker_actions) != cfg.n_malicious:
            raise ValueError("one action per agent is required")
        actions = list(benign_actions) + list(attacker_actions)
        positions = [self._clamp(pos) for _, pos in actions]
        messages = [tokens for tokens, _ in actions]
        rec = self._make_record(self.record.t + 1, positions, messages)
        self.rounds.append(rec)
        if rec.consensus:
            self.consensus_round = rec.t
        self.done = rec.consensus or rec.t >= cfg.T
        return rec, self.done

    def trajectory(self, episode_id: int, seed: int) -> Trajectory:
        return Trajectory(episode_id, self.config, list(self.rounds), self.consensus_round, seed,
                          self.clamp_events)


def run_episode(config: EnvConfig, benign: Sequence[AgentBackend], benign_personalities: Sequence[Personality],
                attackers: Sequence[AgentBackend] = (), seed: int = 0, episode_id: int = 0,
                attacker_personalities: Sequence[Personality] | None = None) -> Trajectory:
    """Play one episode with the given backends and a single seeded RNG stream.

    Attackers act first each round (see module docstring); ``attacker_personalities``
    replaces the true benign types in the attacker's observation.
    """
    rng = np.random.default_rng(seed)
    env = ConsensusEnv(config)
    env.reset(benign_personalities, rng)
    done = env.done
    while not done:
        declarations = [att.act(env.attacker_observation(k, attacker_personalities), rng)
                        for k, att in enumerate(attackers)]
        benign_actions = [agent.act(env.benign_observation(i, declarations), rng)
                          for i, agent in enumerate(benign)]
        _, done = env.step(benign_actions, declarations)
    return env.trajectory(episode_id, seed)

