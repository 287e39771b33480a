"""Run every CLI stage in order for one run directory and report stage timings.

    python3 scripts/run_pipeline.py --config desk --seed 0 --out runs/desk
"""

from __future__ import annotations

import argparse
import sys
import time

from insider_consensus.cli import main

STAGES = ["collect", "train-wm", "eval-wm", "train-clf", "eval-clf", "train-dqn", "evaluate"]


def run(config: str, seed: int, out: str, log_level: str = "WARNING") -> dict[str, float]:
    timings = {}
    for stage in STAGES:
        start = time.perf_counter()
        print(f"== {stage}", flush=True)
        code = main([stage, "--config", config, "--seed", str(seed), "--out", out, "--log-level", log_level])
        timings[stage] = time.perf_counter() - start
        if code != 0:
            raise SystemExit(f"stage {stage} failed with exit code {code}")
    return timings


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--log-level", default="WARNING")
    a = ap.parse_args()
    timings = run(a.config, a.seed, a.out, a.log_level)
    for stage, secs in timings.items():
        print(f"{stage:<10} {secs:8.1f}s")
    print(f"{'total':<10} {sum(timings.values()):8.1f}s")
    sys.exit(0)
