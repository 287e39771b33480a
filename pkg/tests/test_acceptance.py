"""Acceptance suite: one test per criterion, run against a full desk-scale pipeline.

The pipeline runs once per session through the CLI (``desk`` preset, master
seed taken from the config) and every criterion reads its artifacts. Each test
records a PASS/FAIL verdict line that is printed in the terminal summary.
"""

import csv
import itertools
import json
import time

import numpy as np
import pytest

from conftest import VERDICTS
from insider_consensus import cli
from insider_consensus.attacker import QNetwork, evaluate_surrogate, greedy_policy, random_policy
from insider_consensus.config import load_config
from insider_consensus.env import disagreement
from insider_consensus.harness import derive_seed, read_histogram_csv, read_report_csv
from insider_consensus.nn_core import (GRU, Dense, Embedding, Module, Sequential, grad_check, load_checkpoint, mlp,
                                       mse, weighted_cross_entropy)
from insider_consensus.world_model import WorldModel

pytestmark = pytest.mark.slow

PRESET = "desk"
STAGES = ["collect", "train-wm", "eval-wm", "train-clf", "eval-clf", "train-dqn", "evaluate"]
# reference values from the original study, printed for comparison only
WM_REFERENCE = {"overall": (0.927, 0.586)}
TABLE_REFERENCE = {"no_attacker": (0.95, 4.32), "rl": (0.83, 4.91)}


def verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    VERDICTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk") / "run"
    timings = {}
    for stage in STAGES:
        start = time.perf_counter()
        code = cli.main([stage, "--config", PRESET, "--out", str(out)])
        timings[stage] = time.perf_counter() - start
        assert code == 0, f"stage {stage} exited with {code}"
    return out, timings


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def pooled(out):
    return {r.setting: r for r in read_report_csv(out / "report.csv") if r.composition == "overall"}


# 1 -----------------------------------------------------------------------------------------------

class EmbedSum(Module):
    """Embedding lookup summed over the sequence axis, so the loss sees a 2-D prediction."""

    def __init__(self, rng):
        super().__init__()
        self.emb = Embedding(6, 3, rng=rng)

    def forward(self, idx):
        self._n = idx.shape[1]
        return self.emb.forward(idx).sum(axis=1)

    def backward(self, d):
        self.emb.backward(np.repeat(d[:, None, :], self._n, axis=1))


def test_criterion_1_gradient_integrity():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    x = rng.normal(size=(4, 5))
    y = rng.normal(size=(4, 3))
    labels = rng.integers(0, 3, 4)
    alpha = np.array([0.5, 1.0, 2.0])
    weights = np.array([1.0, 3.0, 1.0, 3.0])

    def weighted_mse(pred, target):
        value, grad = mse(pred, target, np.repeat(weights[:, None], pred.shape[1], axis=1))
        return value, grad

    cases = {
        "dense+mse": (mlp([5, 8, 3], rng), weighted_mse, (x,), y),
        "dense+wce": (Sequential(Dense(5, 8, "tanh", rng=rng), Dense(8, 3, rng=rng)),
                      lambda p, t: weighted_cross_entropy(p, t, alpha), (x,), labels),
        "embedding": (EmbedSum(rng), mse, (rng.integers(0, 6, (4, 3)),), y),
        "gru": (GRU(5, 3, rng=rng), mse, (rng.normal(size=(4, 3, 5)), np.array([3, 2, 1, 3])), y),
        "dropout-off": (mlp([5, 6, 3], rng, dropout=0.5), mse, (x,), y),
    }
    errors = {name: grad_check(model, loss, inputs, target, max_coords=40)
              for name, (model, loss, inputs, target) in cases.items()}
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.2f}s"
    verdict(1, "gradient integrity", max(errors.values()) < 1e-4 and elapsed < 30, detail)


# 2 -----------------------------------------------------------------------------------------------

def test_criterion_2_disagreement_oracle():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    ok = True
    for _ in range(10_000):
        ys = rng.integers(0, 21, rng.integers(2, 6)).tolist()
        d = disagreement(ys)
        brute = max(abs(a - b) for a, b in itertools.combinations(ys, 2))
        perm = disagreement(rng.permutation(ys).tolist())
        ok &= d == brute == perm and ((d == 0) == (len(set(ys)) == 1))
    elapsed = time.perf_counter() - start
    verdict(2, "disagreement oracle", ok and elapsed < 5, f"10000 sets, {elapsed:.2f}s")


# 3 -----------------------------------------------------------------------------------------------

def test_criterion_3_world_model_beats_baselines(desk_run):
    out, timings = desk_run
    rows = read_rows(out / "wm_eval.csv")
    mae = {(r["predictor"], r["personality"]): float(r["mae"]) for r in rows}
    acc = {(r["predictor"], r["personality"]): float(r["accuracy"]) for r in rows}
    for r in rows:
        if r["predictor"] == "world_model":
            print(f"  world model {r['personality']:<12} MAE {float(r['mae']):.3f} acc {float(r['accuracy']):.3f}")
    ref_mae, ref_acc = WM_REFERENCE["overall"]
    print(f"  reference overall MAE {ref_mae} acc {ref_acc}")
    model, persist, mean = (mae[(p, "overall")] for p in ("world_model", "persistence", "global_mean"))
    seconds = timings["train-wm"] + timings["eval-wm"]
    ok = model < persist and model < mean and seconds < 600
    verdict(3, "world model beats baselines", ok,
            f"MAE {model:.3f} vs persistence {persist:.3f} and global mean {mean:.3f}; "
            f"acc {acc[('world_model', 'overall')]:.3f}; {seconds:.0f}s")


# 4 -----------------------------------------------------------------------------------------------

def test_criterion_4_classifier_accuracy(desk_run):
    out, timings = desk_run
    rows = {r["class"]: r for r in read_rows(out / "clf_eval.csv")}
    accuracy = float(rows["overall"]["recall"])
    ok = accuracy >= 0.95 and timings["train-clf"] < 600
    verdict(4, "one-episode classifier", ok,
            f"held-out accuracy {accuracy:.3f} on {rows['overall']['n']} agents; train {timings['train-clf']:.0f}s")


# 5 -----------------------------------------------------------------------------------------------

def test_criterion_5_attacker_trend(desk_run):
    out, timings = desk_run
    rows = pooled(out)
    base, rl = rows["no_attacker"], rows["rl"]
    total = sum(timings.values())
    ok = rl.consensus_rate <= base.consensus_rate - 0.05 and rl.aer_mean >= base.aer_mean and total < 3600
    ref = TABLE_REFERENCE
    verdict(5, "attacker efficacy trend", ok,
            f"CR {base.consensus_rate:.3f} -> {rl.consensus_rate:.3f}, AER {base.aer_mean:.2f} -> {rl.aer_mean:.2f}; "
            f"reference CR {ref['no_attacker'][0]} -> {ref['rl'][0]}, AER {ref['no_attacker'][1]} -> {ref['rl'][1]}; "
            f"pipeline {total:.0f}s")


# 6 -----------------------------------------------------------------------------------------------

def test_criterion_6_guessed_matches_known(desk_run):
    out, _ = desk_run
    rows = pooled(out)
    gap = abs(rows["guessed_rl"].consensus_rate - rows["rl"].consensus_rate)
    verdict(6, "guessed ~ known attributes", gap <= 0.03 + 1e-9,
            f"CR rl {rows['rl'].consensus_rate:.3f}, guessed {rows['guessed_rl'].consensus_rate:.3f}, gap {gap:.3f}")


# 7 -----------------------------------------------------------------------------------------------

def test_criterion_7_surrogate_fidelity(desk_run):
    out, _ = desk_run
    cfg = load_config(PRESET)
    wm = WorldModel.from_params(load_checkpoint(out / "world_model.json", "world_model"))
    qnet = QNetwork.from_params(load_checkpoint(out / "qnet.json", "qnet"))
    seed = derive_seed(cfg.env.seed, 7)
    trained = evaluate_surrogate(wm, greedy_policy(qnet), 500, cfg.env, cfg.reward, seed)["mean_return"]
    random = evaluate_surrogate(wm, random_policy(cfg.env.L), 500, cfg.env, cfg.reward, seed)["mean_return"]
    ok = trained >= random + 0.2 * abs(random)
    verdict(7, "surrogate fidelity", ok, f"mean return trained {trained:.3f} vs random {random:.3f}, 500 paired episodes")


# 8 -----------------------------------------------------------------------------------------------

def test_criterion_8_reproducible_reports(desk_run):
    out, _ = desk_run
    first = (out / "report.csv").read_bytes()
    assert cli.main(["evaluate", "--config", PRESET, "--out", str(out)]) == 0
    second = (out / "report.csv").read_bytes()
    manifest = json.loads((out / "manifests" / "evaluate.json").read_text())
    verdict(8, "reproducibility", first == second,
            f"{len(first)} bytes, identical={first == second}, seed {manifest['master_seed']}")


# 9 -----------------------------------------------------------------------------------------------

def test_criterion_9_round_distribution(desk_run):
    out, _ = desk_run
    T = load_config(PRESET).env.T
    hist = read_histogram_csv(out / "histogram.csv")
    at_t = {s: counts[T] for s, counts in hist.items()}
    others = [s for s in at_t if s != "no_attacker"]
    ok = bool(others) and all(at_t[s] > at_t["no_attacker"] for s in others)
    verdict(9, "round-distribution shape", ok, ", ".join(f"{s} {c}" for s, c in at_t.items()) + f" at round {T}")
