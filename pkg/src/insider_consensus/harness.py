"""Evaluation grid: compositions x attacker settings, aggregation and reports."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attacker import QNetwork, deploy_attacker
from .classifier import AttributeClassifier
from .env import BENIGN_TYPES, EnvConfig, Personality, Trajectory, run_episode
from .policies import DEFAULT_PARAMS, HeuristicAttacker, PersonalityParams, RandomAttacker, scripted_agents
from .store import ArtifactError

COMPOSITIONS: tuple[tuple[int, int, int], ...] = (
    (3, 0, 0), (0, 3, 0), (0, 0, 3), (2, 1, 0), (2, 0, 1),
    (1, 2, 0), (1, 0, 2), (0, 2, 1), (0, 1, 2), (1, 1, 1),
)
SETTING_LABELS = {"no_attacker": "No Attacker", "heuristic": "Heuristic Attacker",
                  "rl": "RL Attacker", "guessed_rl": "Guessed RL Attacker"}
PROFILING_STREAM = 10**6


def composition_personalities(counts: Sequence[int]) -> list[Personality]:
    if len(counts) != len(BENIGN_TYPES) or min(counts) < 0:
        raise ValueError(f"composition needs three nonnegative counts, got {counts}")
    return [p for p, k in zip(BENIGN_TYPES, counts) for _ in range(k)]


def composition_label(counts: Sequence[int]) -> str:
    return "-".join(str(k) for k in counts)


def derive_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1, np.uint64)[0])


def episode_seeds(master_seed: int, comp_index: int, n: int) -> list[int]:
    """Scored-episode seeds; shared by every setting so cells are paired."""
    return [derive_seed(master_seed, comp_index, e) for e in range(n)]


def profiling_seed(master_seed: int, comp_index: int) -> int:
    return derive_seed(master_seed, comp_index, PROFILING_STREAM)


@dataclass(frozen=True)
class EpisodeResult:
    setting: str
    composition: str
    episode: int
    seed: int
    consensus: bool
    rounds: int

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "EpisodeResult":
        return cls(**doc)


def _results(setting: str, counts, seeds: Sequence[int], trajs: Sequence[Trajectory]) -> list[EpisodeResult]:
    return [EpisodeResult(setting, composition_label(counts), i, s, t.consensus, t.rounds_used)
            for i, (s, t) in enumerate(zip(seeds, trajs))]


def run_setting(setting: str, comp_index: int, env_config: EnvConfig, master_seed: int, n_episodes: int = 50,
                params: Mapping[Personality, PersonalityParams] = DEFAULT_PARAMS,
                qnet: QNetwork | None = None, classifier: AttributeClassifier | None = None) -> list[EpisodeResult]:
    counts = COMPOSITIONS[comp_index]
    pers = composition_personalities(counts)
    seeds = episode_seeds(master_seed, comp_index, n_episodes)
    if setting == "no_attacker":
        # the malicious slot becomes an extra neutral agent that counts toward disagreement
        cfg = EnvConfig(env_config.L, env_config.T, env_config.n_benign + env_config.n_malicious, 0,
                        env_config.consensus_tolerance, env_config.full_visibility, env_config.seed)
        full = pers + [Personality.NEUTRAL] * env_config.n_malicious
        trajs = [run_episode(cfg, scripted_agents(full, params), full, seed=s, episode_id=i)
                 for i, s in enumerate(seeds)]
    elif setting == "heuristic":
        trajs = [run_episode(env_config, scripted_agents(pers, params), pers,
                             [HeuristicAttacker() for _ in range(env_config.n_malicious)], seed=s, episode_id=i)
                 for i, s in enumerate(seeds)]
    elif setting in ("rl", "guessed_rl"):
        if qnet is None:
            raise ArtifactError(f"setting {setting!r} needs a trained Q-network checkpoint (qnet.json)")
        if setting == "guessed_rl" and classifier is None:
            raise ArtifactError("setting 'guessed_rl' needs a trained classifier checkpoint (classifier.json)")
        source = "true" if setting == "rl" else "inferred"
        trajs = deploy_attacker(qnet, pers, env_config, seeds, source, classifier,
                                profiling_seed(master_seed, comp_index), params).trajectories
    else:
        raise ValueError(f"unknown setting {setting!r}")
    return _results(setting, counts, seeds, trajs)


def run_grid(settings: Sequence[str], env_config: EnvConfig, master_seed: int, n_episodes: int = 50,
             params: Mapping[Personality, PersonalityParams] = DEFAULT_PARAMS, qnet: QNetwork | None = None,
             classifier: AttributeClassifier | None = None) -> list[EpisodeResult]:
    out: list[EpisodeResult] = []
    for setting in settings:
        for ci in range(len(COMPOSITIONS)):
            out.extend(run_setting(setting, ci, env_config, master_seed, n_episodes, params, qnet, classifier))
    return out


@dataclass(frozen=True)
class CellStats:
    setting: str
    composition: str
    n: int
    consensus_rate: float
    aer_mean: float
    aer_std: float


def cell_stats(setting: str, composition: str, results: Sequence[EpisodeResult],
               failure_rounds: str = "horizon") -> CellStats:
    """CR and AER mean +- population std. Failures already carry rounds = T."""
    n = len(results)
    if n == 0:
        raise ValueError("no episodes to aggregate")
    cr = sum(r.consensus for r in results) / n
    rounds = [r.rounds for r in results if failure_rounds == "horizon" or r.consensus]
    if rounds:
        mean, std = float(np.mean(rounds)), float(np.std(rounds))
    else:
        mean = std = float("nan")
    return CellStats(setting, composition, n, cr, mean, std)


def aggregate(results: Sequence[EpisodeResult], failure_rounds: str = "horizon") -> list[CellStats]:
    """One row per (setting, composition) plus a pooled ``overall`` row per setting."""
    if not results:
        raise ValueError("no episodes to aggregate")
    settings = list(dict.fromkeys(r.setting for r in results))
    comps = [composition_label(c) for c in COMPOSITIONS]
    comps += sorted({r.composition for r in results} - set(comps))
    rows = []
    for s in settings:
        mine = [r for r in results if r.setting == s]
        for c in comps:
            cell = [r for r in mine if r.composition == c]
            if cell:
                rows.append(cell_stats(s, c, cell, failure_rounds))
        rows.append(cell_stats(s, "overall", mine, failure_rounds))
    return rows


def round_histogram(results: Sequence[EpisodeResult], T: int,
                    settings: Sequence[str] | None = None) -> dict[str, list[int]]:
    """Per-setting episode counts indexed by round 0..T (round 0 = consensus at placement)."""
    if settings is None:
        settings = list(dict.fromkeys(r.setting for r in results))
    hist = {s: [0] * (T + 1) for s in settings}
    for r in results:
        if r.setting in hist:
            hist[r.setting][r.rounds] += 1
    return hist


def write_report_csv(path: str | Path, rows: Sequence[CellStats]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "composition", "n", "CR", "AER_mean", "AER_std"])
        for r in rows:
            w.writerow([r.setting, r.composition, r.n, f"{r.consensus_rate:.4f}", f"{r.aer_mean:.4f}",
                        f"{r.aer_std:.4f}"])
    return path


def read_report_csv(path: str | Path) -> list[CellStats]:
    with Path(path).open() as fh:
        return [CellStats(d["setting"], d["composition"], int(d["n"]), float(d["CR"]), float(d["AER_mean"]),
                          float(d["AER_std"])) for d in csv.DictReader(fh)]


def write_histogram_csv(path: str | Path, hist: Mapping[str, list[int]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "round", "count"])
        for s, counts in hist.items():
            for k, c in enumerate(counts):
                w.writerow([s, k, c])
    return path


def read_histogram_csv(path: str | Path) -> dict[str, list[int]]:
    hist: dict[str, list[int]] = {}
    with Path(path).open() as fh:
        for d in csv.DictReader(fh):
            counts = hist.setdefault(d["setting"], [])
            k = int(d["round"])
            counts.extend([0] * (k + 1 - len(counts)))
            counts[k] = int(d["count"])
    return hist


def format_table(rows: Sequence[CellStats]) -> str:
    """Aligned text table: one line per composition, CR and AER per setting."""
    settings = list(dict.fromkeys(r.setting for r in rows))
    by_key = {(r.setting, r.composition): r for r in rows}
    comps = list(dict.fromkeys(r.composition for r in rows if r.composition != "overall")) + ["overall"]
    head = f"{'Stub':>4} {'Sugg':>4} {'Neut':>4}"
    top = " " * len(head)
    sub = head
    for s in settings:
        label = SETTING_LABELS.get(s, s)
        top += f" | {label:^19}"
        sub += f" | {'CR':>5} {'AER':>13}"
    out = io.StringIO()
    out.write(top.rstrip() + "\n" + sub + "\n" + "-" * len(sub) + "\n")
    for c in comps:
        if c == "overall":
            line = f"{'Overall':<14}"
        else:
            parts = c.split("-")
            line = " ".join(f"{p:>4}" for p in parts) if len(parts) == 3 else f"{c:<14}"
        for s in settings:
            r = by_key.get((s, c))
            line += " | " + (f"{r.consensus_rate:5.2f} {r.aer_mean:5.2f} ± {r.aer_std:4.2f}" if r else " " * 19)
        out.write(line + "\n")
    return out.getvalue()


def collect_corpus(n: int, seed: int, env_config: EnvConfig = EnvConfig(),
                   params: Mapping[Personality, PersonalityParams] = DEFAULT_PARAMS, stream: int = 0) -> list[Trajectory]:
    """Scripted episodes with i.i.d. uniform benign types and a uniform-random insider.

    ``stream`` separates independent corpora (training vs held-out) under one seed.
    """
    out = []
    for i, child in enumerate(np.random.SeedSequence([seed, stream]).spawn(n)):
        rng = np.random.default_rng(child)
        pers = [BENIGN_TYPES[k] for k in rng.integers(0, len(BENIGN_TYPES), env_config.n_benign)]
        ep_seed = int(rng.integers(2**63))
        out.append(run_episode(env_config, scripted_agents(pers, params), pers,
                               [RandomAttacker() for _ in range(env_config.n_malicious)], seed=ep_seed, episode_id=i))
    return out
