"""Command-line entry point.

Every subcommand reads and writes artifacts inside one run directory
(``--out``) and records a manifest under ``<out>/manifests``. Exit codes:
0 success, 1 runtime failure (missing artifact, training error), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attacker import QNetwork, train_attacker, write_curve_csv
from .classifier import (AttributeClassifier, episode_examples, evaluate_classifier, train_classifier,
                         write_classifier_csv)
from .config import Config, ConfigError, config_hash, dump_config, load_config
from .harness import (EpisodeResult, aggregate, collect_corpus, derive_seed, format_table, round_histogram,
                      run_grid, write_histogram_csv, write_report_csv)
from .nn_core import CheckpointError, TrainingError, load_checkpoint, save_checkpoint
from .store import (ArtifactError, RunManifest, hash_files, load_trajectories, read_jsonl, save_trajectories,
                    write_jsonl, write_manifest)
from .world_model import WorldModel, build_dataset, compare_with_baselines, train_world_model, write_eval_csv

log = logging.getLogger("insider_consensus")

CORPUS, HELDOUT = "corpus.jsonl", "heldout.jsonl"
WM_CKPT, CLF_CKPT, QNET_CKPT, QNET_FINAL = "world_model.json", "classifier.json", "qnet.json", "qnet_final.json"
EPISODES, REPORT_CSV, REPORT_TXT, HIST_CSV = "episodes.jsonl", "report.csv", "report.txt", "histogram.csv"

# per-command seed tags so each stage draws from its own stream
SEED_TAGS = {"train-wm": 101, "train-clf": 102, "train-dqn": 103}


@dataclass
class Context:
    config: Config
    seed: int
    out: Path
    command: str
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)

    def require(self, name: str, producer: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise ArtifactError(f"missing artifact: {path} (produce it with `{producer}`)")
        self.inputs.append(path)
        return path

    def output(self, name: str) -> Path:
        path = self.out / name
        self.outputs.append(path)
        return path

    def stage_seed(self) -> int:
        return derive_seed(self.seed, SEED_TAGS[self.command])


def _write_rows(path: Path, rows: list[dict]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def cmd_collect(ctx: Context) -> None:
    h, env = ctx.config.harness, ctx.config.env
    params = ctx.config.personality_params
    save_trajectories(ctx.output(CORPUS), collect_corpus(h.corpus_episodes, ctx.seed, env, params, stream=0))
    save_trajectories(ctx.output(HELDOUT), collect_corpus(h.heldout_episodes, ctx.seed, env, params, stream=1))
    print(f"wrote {h.corpus_episodes} training and {h.heldout_episodes} held-out episodes to {ctx.out}")


def cmd_train_wm(ctx: Context) -> None:
    transitions = build_dataset(load_trajectories(ctx.require(CORPUS, "collect")))
    write_jsonl(ctx.output("transitions.jsonl"), (t.to_json() for t in transitions))
    model, history = train_world_model(transitions, ctx.config.env.L, ctx.config.world_model, ctx.stage_seed())
    save_checkpoint(ctx.output(WM_CKPT), model.snapshot())
    _write_rows(ctx.output("wm_history.csv"), history)
    print(f"world model trained; best val loss {min(r['val_loss'] for r in history):.4f}")


def cmd_eval_wm(ctx: Context) -> None:
    model = WorldModel.from_params(load_checkpoint(ctx.require(WM_CKPT, "train-wm"), "world_model"))
    train = build_dataset(load_trajectories(ctx.require(CORPUS, "collect")))
    heldout = build_dataset(load_trajectories(ctx.require(HELDOUT, "collect")))
    rows = compare_with_baselines(model, heldout, float(np.mean([t.label for t in train])))
    write_eval_csv(ctx.output("wm_eval.csv"), rows)
    for r in rows:
        print(f"{r['predictor']:<12} {r['personality']:<12} MAE {r['mae']:.3f}  acc {r['accuracy']:.3f}  n {r['n']}")


def _examples(path: Path, max_rounds):
    return [e for t in load_trajectories(path) for e in episode_examples(t, max_rounds)]


def cmd_train_clf(ctx: Context) -> None:
    cfg = ctx.config
    examples = _examples(ctx.require(CORPUS, "collect"), cfg.classifier.max_rounds)
    model, history = train_classifier(examples, cfg.env.L, cfg.env.T, cfg.classifier, ctx.stage_seed())
    save_checkpoint(ctx.output(CLF_CKPT), model.snapshot())
    _write_rows(ctx.output("clf_history.csv"), history)
    print(f"classifier trained; best val accuracy {max(r['val_accuracy'] for r in history):.4f}")


def cmd_eval_clf(ctx: Context) -> None:
    model = AttributeClassifier.from_params(load_checkpoint(ctx.require(CLF_CKPT, "train-clf"), "classifier"))
    rows = evaluate_classifier(model, _examples(ctx.require(HELDOUT, "collect"), model.config.max_rounds))
    write_classifier_csv(ctx.output("clf_eval.csv"), rows)
    for r in rows:
        print(f"{r['class']:<12} precision {r['precision']:.3f}  recall {r['recall']:.3f}  n {r['n']}")


def cmd_train_dqn(ctx: Context) -> None:
    cfg = ctx.config
    wm = WorldModel.from_params(load_checkpoint(ctx.require(WM_CKPT, "train-wm"), "world_model"))
    result = train_attacker(wm, cfg.dqn, cfg.env, cfg.reward, ctx.stage_seed())
    save_checkpoint(ctx.output(QNET_CKPT), result.qnet.snapshot())
    save_checkpoint(ctx.output(QNET_FINAL), result.final_qnet.snapshot())
    write_curve_csv(ctx.output("dqn_curve.csv"), result.curve)
    print(f"attacker trained; kept checkpoint from step {result.best_step}")


def _write_reports(ctx: Context, results: list[EpisodeResult]) -> None:
    cfg = ctx.config
    rows = aggregate(results, cfg.harness.failure_rounds)
    write_report_csv(ctx.output(REPORT_CSV), rows)
    table = format_table(rows)
    ctx.output(REPORT_TXT).write_text(table)
    write_histogram_csv(ctx.output(HIST_CSV), round_histogram(results, cfg.env.T))
    print(table, end="")


def cmd_evaluate(ctx: Context) -> None:
    cfg = ctx.config
    settings = cfg.harness.settings
    qnet = classifier = None
    if "rl" in settings or "guessed_rl" in settings:
        qnet = QNetwork.from_params(load_checkpoint(ctx.require(QNET_CKPT, "train-dqn"), "qnet"))
    if "guessed_rl" in settings:
        classifier = AttributeClassifier.from_params(load_checkpoint(ctx.require(CLF_CKPT, "train-clf"), "classifier"))
    results = run_grid(settings, cfg.env, ctx.seed, cfg.harness.episodes_per_cell, cfg.personality_params,
                       qnet, classifier)
    write_jsonl(ctx.output(EPISODES), (r.to_json() for r in results))
    _write_reports(ctx, results)


def cmd_report(ctx: Context) -> None:
    results = [EpisodeResult.from_json(d) for d in read_jsonl(ctx.require(EPISODES, "evaluate"))]
    if not results:
        raise ArtifactError(f"{ctx.out / EPISODES} holds no episodes")
    _write_reports(ctx, results)


COMMANDS = {
    "collect": (cmd_collect, "collect the scripted training and held-out corpora"),
    "train-wm": (cmd_train_wm, "train the world model on the corpus"),
    "eval-wm": (cmd_eval_wm, "evaluate the world model against baselines on held-out episodes"),
    "train-clf": (cmd_train_clf, "train the personality classifier"),
    "eval-clf": (cmd_eval_clf, "evaluate the classifier on held-out episodes"),
    "train-dqn": (cmd_train_dqn, "train the DQN attacker inside the world model"),
    "evaluate": (cmd_evaluate, "run the composition x setting grid in the scripted environment"),
    "report": (cmd_report, "rebuild report tables and histograms from evaluated episodes"),
}


def seed_arg(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default",
                        help="preset name (default, desk, paper) or path to a YAML config")
    common.add_argument("--seed", type=seed_arg, default=None, help="master seed (defaults to env.seed)")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser = argparse.ArgumentParser(prog="insider-consensus", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else config.env.seed
    ctx = Context(config, seed, args.out, args.command)
    func = COMMANDS[args.command][0]
    start = time.perf_counter()
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        func(ctx)
        config_path = ctx.out / "manifests" / f"{args.command}.config.yaml"
        config_path.parent.mkdir(parents=True, exist_ok=True)
        config_path.write_text(dump_config(config))
        manifest = RunManifest(args.command, config_hash(config), seed, hash_files(ctx.inputs, ctx.out),
                               hash_files(ctx.outputs + [config_path], ctx.out),
                               round(time.perf_counter() - start, 3), __version__)
        write_manifest(ctx.out, manifest)
    except (ArtifactError, CheckpointError, TrainingError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
