"""Grid search over scripted-personality parameters.

Prints pooled no-attacker and heuristic-attacker CR/AER over the composition
grid for each candidate, so the shipped defaults can be re-derived. The target
band for the no-attacker AER is 3.5-5.5 rounds.

    python3 scripts/calibrate_policies.py --episodes 50
"""

from __future__ import annotations

import argparse
import itertools

import numpy as np

from insider_consensus.env import EnvConfig, Personality
from insider_consensus.harness import COMPOSITIONS, run_setting
from insider_consensus.policies import DEFAULT_PARAMS, PersonalityParams, TargetRule


def pooled(setting: str, params, episodes: int, seed: int) -> tuple[float, float]:
    res = [r for ci in range(len(COMPOSITIONS))
           for r in run_setting(setting, ci, EnvConfig(), seed, episodes, params)]
    return float(np.mean([r.consensus for r in res])), float(np.mean([r.rounds for r in res]))


def candidates(args):
    for a_s, p_s, a_n, p_n, noise in itertools.product(args.stubborn_alpha, args.stubborn_stay,
                                                       args.neutral_alpha, args.neutral_stay, args.noise):
        yield {
            Personality.STUBBORN: PersonalityParams(a_s, p_s, noise, TargetRule.MEAN_OF_VISIBLE),
            Personality.SUGGESTIBLE: PersonalityParams(0.9, 0.0, noise, TargetRule.RANDOM_NEIGHBOR),
            Personality.NEUTRAL: PersonalityParams(a_n, p_n, noise, TargetRule.BLEND_SELF_MEAN),
        }


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--stubborn-alpha", type=float, nargs="+", default=[0.6, 0.8])
    ap.add_argument("--stubborn-stay", type=float, nargs="+", default=[0.3])
    ap.add_argument("--neutral-alpha", type=float, nargs="+", default=[0.7, 0.9])
    ap.add_argument("--neutral-stay", type=float, nargs="+", default=[0.05])
    ap.add_argument("--noise", type=float, nargs="+", default=[0.1])
    ap.add_argument("--defaults-only", action="store_true", help="evaluate only the shipped defaults")
    args = ap.parse_args()
    grid = [DEFAULT_PARAMS] if args.defaults_only else candidates(args)
    for params in grid:
        desc = " ".join(f"{p.label}=({v.move_fraction},{v.stay_probability},{v.noise_probability})"
                        for p, v in params.items())
        cr0, aer0 = pooled("no_attacker", params, args.episodes, args.seed)
        cr1, aer1 = pooled("heuristic", params, args.episodes, args.seed)
        print(f"{desc}  none CR {cr0:.3f} AER {aer0:.2f} | heuristic CR {cr1:.3f} AER {aer1:.2f}", flush=True)
