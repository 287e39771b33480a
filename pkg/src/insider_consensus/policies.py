"""Scripted agent policies and message templates.

Benign agents are parametric stochastic movers whose qualitative behaviour
follows three personality styles; the insider baseline is a max-min-distance
heuristic. Policies read positions only. Messages come from per-personality
phrase pools that share no phrase, plus a ``pos_<k>`` token.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .env import Action, AgentObservation, AttackerObservation, Personality


class TargetRule(str, enum.Enum):
    MEAN_OF_VISIBLE = "mean_of_visible"  # centroid of everyone visible, self included
    RANDOM_NEIGHBOR = "random_neighbor"
    BLEND_SELF_MEAN = "blend_self_mean"  # mean of neighbours, blended with self via alpha


@dataclass(frozen=True)
class PersonalityParams:
    move_fraction: float
    stay_probability: float
    noise_probability: float
    target_rule: TargetRule

    def __post_init__(self) -> None:
        for name in ("move_fraction", "stay_probability", "noise_probability"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        object.__setattr__(self, "target_rule", TargetRule(self.target_rule))


DEFAULT_PARAMS: dict[Personality, PersonalityParams] = {
    Personality.STUBBORN: PersonalityParams(0.8, 0.3, 0.1, TargetRule.MEAN_OF_VISIBLE),
    Personality.SUGGESTIBLE: PersonalityParams(0.9, 0.0, 0.1, TargetRule.RANDOM_NEIGHBOR),
    Personality.NEUTRAL: PersonalityParams(0.7, 0.05, 0.1, TargetRule.BLEND_SELF_MEAN),
}

PHRASE_POOLS: dict[Personality, tuple[str, ...]] = {
    Personality.STUBBORN: (
        "i would rather_not_move from my spot",
        "staying put here suits me best",
        "moving that far seems excessive",
        "i intend to hold my ground",
        "my current place is good enough",
        "only a tiny step is acceptable to me",
        "please come closer to where i stand",
    ),
    Personality.SUGGESTIBLE: (
        "happy to follow your lead",
        "i will come over to join you",
        "lead the way and i will tag along",
        "your spot sounds great to me",
        "glad to move wherever you are",
        "whatever you pick works for me",
        "i can easily adopt your position",
    ),
    Personality.NEUTRAL: (
        "let us meet somewhere in the middle",
        "finding common ground is our goal",
        "balancing everyone seems fair",
        "we can agree on a shared point soon",
        "meeting halfway keeps us together",
        "cooperation will bring agreement",
        "a compromise between us works well",
    ),
    Personality.MALICIOUS: (
        "the far side looks like the natural meeting point",
        "maybe we should reconsider before converging",
        "it is unclear where the group is heading",
        "some agents seem to be drifting elsewhere",
        "perhaps the edge is a safer choice",
        "i doubt the middle suits everyone",
    ),
}


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def render_message(personality: Personality, position: int, rng,
                   pools: Mapping[Personality, Sequence[str]] = PHRASE_POOLS) -> list[str]:
    pool = pools[personality]
    if not pool:
        raise ValueError(f"empty phrase pool for {personality.label}")
    phrase = pool[int(rng.integers(len(pool)))]
    return phrase.lower().split() + [f"pos_{int(position)}"]


def benign_act(personality: Personality, params: PersonalityParams, obs: AgentObservation, rng,
               pools: Mapping[Personality, Sequence[str]] = PHRASE_POOLS) -> Action:
    if not obs.neighbor_positions:
        raise ValueError("benign_act needs at least one visible neighbour")
    own = obs.own_position
    others = obs.neighbor_positions
    stay = rng.random() < params.stay_probability
    if params.target_rule is TargetRule.RANDOM_NEIGHBOR:
        target = others[int(rng.integers(len(others)))]
    elif params.target_rule is TargetRule.MEAN_OF_VISIBLE:
        target = (own + sum(others)) / (len(others) + 1)
    else:
        target = sum(others) / len(others)
    nxt = round_half_away(own + params.move_fraction * (target - own))
    if rng.random() < params.noise_probability:
        nxt += 1 if rng.random() < 0.5 else -1
    if stay:
        nxt = own
    nxt = min(max(nxt, 0), obs.L)
    return render_message(personality, nxt, rng, pools), nxt


def max_min_distance_position(benign_positions: Sequence[int], L: int) -> int:
    """Position in [0, L] farthest from its nearest benign agent; ties go high."""
    pos = np.asarray(benign_positions)
    cand = np.arange(L + 1)
    gaps = np.abs(cand[:, None] - pos[None, :]).min(axis=1)
    return int(L - np.argmax(gaps[::-1]))


def heuristic_malicious_act(obs: AttackerObservation, rng,
                            pools: Mapping[Personality, Sequence[str]] = PHRASE_POOLS) -> Action:
    if not obs.neighbor_positions:
        raise ValueError("heuristic attacker needs at least one visible benign position")
    pos = max_min_distance_position(obs.neighbor_positions, obs.L)
    return render_message(Personality.MALICIOUS, pos, rng, pools), pos


@dataclass
class ScriptedAgent:
    personality: Personality
    params: PersonalityParams
    pools: Mapping[Personality, Sequence[str]] = field(default_factory=lambda: PHRASE_POOLS)

    def act(self, obs: AgentObservation, rng) -> Action:
        return benign_act(self.personality, self.params, obs, rng, self.pools)


class HeuristicAttacker:
    def act(self, obs: AttackerObservation, rng) -> Action:
        return heuristic_malicious_act(obs, rng)


class RandomAttacker:
    """Declares uniform random positions; used for corpus collection."""

    def act(self, obs: AttackerObservation, rng) -> Action:
        pos = int(rng.integers(0, obs.L + 1))
        return render_message(Personality.MALICIOUS, pos, rng), pos


class MeanFollowingAttacker:
    """Acts neutrally by declaring the rounded mean of the visible benign positions."""

    def act(self, obs: AttackerObservation, rng) -> Action:
        pos = round_half_away(sum(obs.neighbor_positions) / len(obs.neighbor_positions))
        return render_message(Personality.MALICIOUS, pos, rng), pos


def scripted_agents(personalities: Sequence[Personality],
                    params: Mapping[Personality, PersonalityParams] = DEFAULT_PARAMS) -> list[ScriptedAgent]:
    return [ScriptedAgent(p, params[p]) for p in personalities]
