"""Latent-agent world model: per-agent next-position regression.

Each sample predicts one benign agent's next position. Agents are reordered
so the target comes first and the rest follow sorted by (personality id,
position). Positions (scaled by 1/L) go through a two-layer MLP, personality
embeddings are flattened through a separate type MLP, and the concatenation
feeds the head that matches the target's personality. Outputs are in raw
position units and unclamped.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .env import BENIGN_TYPES, Personality, Trajectory
from .nn_core import Adam, Embedding, LinearSchedule, ModelParams, Module, TrainingError, mlp, mse

log = logging.getLogger(__name__)

N_TYPES = 4


@dataclass(frozen=True)
class WorldModelConfig:
    embedding_dim: int = 128
    hidden_dim: int = 128
    dropout: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    weight_decay: float = 1e-5
    lr_start: float = 1e-3
    lr_end: float = 1e-4
    val_split: float = 0.1
    suggestible_weight: float = 3.0
    other_weight: float = 1.0
    label_noise_std: float = 0.0
    decoupled_weight_decay: bool = False

    def __post_init__(self) -> None:
        for name in ("embedding_dim", "hidden_dim", "epochs", "batch_size", "lr_start", "lr_end"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("weight_decay", "suggestible_weight", "other_weight", "label_noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if not 0 < self.val_split < 1:
            raise ValueError("val_split must be in (0, 1)")


@dataclass(frozen=True)
class Transition:
    target_id: int
    positions: tuple[int, ...]
    personalities: tuple[int, ...]
    attacker_position: int
    label: int

    @property
    def target_personality(self) -> Personality:
        return Personality(self.personalities[0])

    def to_json(self) -> dict:
        return {"target_id": self.target_id, "positions": list(self.positions),
                "personalities": list(self.personalities), "attacker_position": self.attacker_position,
                "label": self.label}

    @classmethod
    def from_json(cls, doc: dict) -> "Transition":
        return cls(int(doc["target_id"]), tuple(doc["positions"]), tuple(doc["personalities"]),
                   int(doc["attacker_position"]), int(doc["label"]))


def order_slots(positions: Sequence[int], personalities: Sequence[int], target: int) -> tuple[tuple, tuple]:
    tail = sorted((int(personalities[j]), int(positions[j])) for j in range(len(positions)) if j != target)
    return ((int(positions[target]),) + tuple(p for _, p in tail),
            (int(personalities[target]),) + tuple(k for k, _ in tail))


def ordered_batch(positions: np.ndarray, personalities: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``order_slots`` over rows of (B, N) integer arrays."""
    n = positions.shape[1]
    tail = [j for j in range(n) if j != target]
    tp, tk = positions[:, tail], personalities[:, tail]
    order = np.argsort(tk * 10_000 + tp, axis=1, kind="stable")
    tp = np.take_along_axis(tp, order, axis=1)
    tk = np.take_along_axis(tk, order, axis=1)
    return (np.concatenate([positions[:, [target]], tp], axis=1),
            np.concatenate([personalities[:, [target]], tk], axis=1))


def build_dataset(trajectories: Iterable[Trajectory]) -> list[Transition]:
    """One transition per benign agent per consecutive round pair.

    The insider slot holds the position declared during the step, i.e. the
    value stored in the later round, which is what benign agents reacted to.
    """
    out: list[Transition] = []
    for tr in trajectories:
        nb = tr.config.n_benign
        pers = [int(p) for p in tr.personalities]
        for cur, nxt in zip(tr.rounds[:-1], tr.rounds[1:]):
            positions = cur.positions[:nb] + nxt.positions[nb:]
            attacker = nxt.positions[nb] if len(positions) > nb else -1
            for j in range(nb):
                pos, kinds = order_slots(positions, pers, j)
                out.append(Transition(j, pos, kinds, attacker, nxt.agents[j].position))
    return out


def transition_arrays(transitions: Sequence[Transition]) -> dict[str, np.ndarray]:
    return {
        "positions": np.array([t.positions for t in transitions], dtype=np.int64),
        "personalities": np.array([t.personalities for t in transitions], dtype=np.int64),
        "labels": np.array([t.label for t in transitions], dtype=np.float32),
    }


class WorldModel(Module):
    def __init__(self, n_slots: int, L: int, config: WorldModelConfig = WorldModelConfig(), seed: int = 0) -> None:
        super().__init__()
        rng = np.random.default_rng(seed)
        H, E = config.hidden_dim, config.embedding_dim
        self.n_slots, self.L, self.config = n_slots, L, config
        self.pos_mlp = mlp([n_slots, H, H], rng, config.dropout, final_activation="relu")
        self.type_embedding = Embedding(N_TYPES, E, rng=rng)
        self.type_mlp = mlp([n_slots * E, H, H], rng, config.dropout, final_activation="relu")
        self.heads = [mlp([2 * H, H, 1], rng, config.dropout) for _ in BENIGN_TYPES]

    def forward(self, positions: np.ndarray, personalities: np.ndarray) -> np.ndarray:
        """``positions`` raw (B, n_slots), ``personalities`` ids (B, n_slots); target in slot 0."""
        personalities = np.asarray(personalities)
        heads = personalities[:, 0]
        if np.any(heads == Personality.MALICIOUS):
            raise ValueError("no prediction head exists for a malicious target")
        x = np.asarray(positions, dtype=np.float32) / np.float32(self.L)
        pos_feat = self.pos_mlp.forward(x)
        emb = self.type_embedding.forward(personalities)
        type_feat = self.type_mlp.forward(emb.reshape(len(x), -1))
        feat = np.concatenate([pos_feat, type_feat], axis=1)
        out = np.zeros(len(x), dtype=feat.dtype)
        self._groups = []
        for k, head in enumerate(self.heads):
            rows = np.flatnonzero(heads == k)
            if rows.size:
                out[rows] = head.forward(feat[rows])[:, 0]
            self._groups.append(rows)
        self._feat_shape = feat.shape
        return out * self.L

    def backward(self, dout: np.ndarray) -> None:
        dfeat = np.zeros(self._feat_shape, dtype=dout.dtype)
        dout = dout * self.L
        # each head cached only the rows routed to it
        for head, rows in zip(self.heads, self._groups):
            if rows.size:
                dfeat[rows] = head.backward(dout[rows][:, None])
        H = self.config.hidden_dim
        self.pos_mlp.backward(dfeat[:, :H])
        demb = self.type_mlp.backward(dfeat[:, H:])
        self.type_embedding.backward(demb.reshape(len(dfeat), self.n_slots, -1))

    def predict(self, positions: np.ndarray, personalities: np.ndarray) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            return self.forward(positions, personalities)
        finally:
            self.train(was)

    def hyperparameters(self) -> dict:
        return {"n_slots": self.n_slots, "L": self.L, **asdict(self.config)}

    def snapshot(self) -> ModelParams:
        return ModelParams.from_module("world_model", self.hyperparameters(), self)

    @classmethod
    def from_params(cls, params: ModelParams) -> "WorldModel":
        hp = dict(params.hyperparameters)
        n_slots, L = hp.pop("n_slots"), hp.pop("L")
        model = cls(n_slots, L, WorldModelConfig(**hp))
        return params.load_into(model).eval()


def sample_weights(personalities: np.ndarray, config: WorldModelConfig) -> np.ndarray:
    return np.where(personalities == Personality.SUGGESTIBLE, config.suggestible_weight,
                    config.other_weight).astype(np.float32)


def train_world_model(transitions: Sequence[Transition], L: int, config: WorldModelConfig = WorldModelConfig(),
                      seed: int = 0) -> tuple[WorldModel, list[dict]]:
    """Weighted-MSE training; returns the lowest-validation-loss model and per-epoch losses."""
    if len(transitions) < 2:
        raise ValueError("need at least two transitions to train")
    if len(transitions) < 10 * config.batch_size:
        log.warning("world-model dataset has only %d transitions (< 10 batches)", len(transitions))
    rng = np.random.default_rng(seed)
    data = transition_arrays(transitions)
    n = len(transitions)
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(config.val_split * n))), n - 1)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    model = WorldModel(data["positions"].shape[1], L, config, seed=int(rng.integers(2**31)))
    params = model.parameters()
    opt = Adam(params, config.lr_start, config.weight_decay, decoupled=config.decoupled_weight_decay)
    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    schedule = LinearSchedule(config.lr_start, config.lr_end, config.epochs * steps_per_epoch)
    weights = sample_weights(data["personalities"][:, 0], config)

    def val_loss() -> float:
        pred = model.predict(data["positions"][val_idx], data["personalities"][val_idx])
        return mse(pred, data["labels"][val_idx], weights[val_idx])[0]

    grads = model.gradients()
    history: list[dict] = []
    best_loss, best_state = math.inf, None
    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(train_idx)
        total, count = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            labels = data["labels"][idx]
            if config.label_noise_std > 0:
                labels = labels + rng.normal(0, config.label_noise_std, len(idx)).astype(np.float32)
            model.zero_grad()
            pred = model.forward(data["positions"][idx], data["personalities"][idx])
            loss, dpred = mse(pred, labels, weights[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite world-model loss at epoch {epoch} batch {b}")
            model.backward(dpred)
            opt.step(grads, lr=schedule.value(step))
            step += 1
            total += loss * len(idx)
            count += len(idx)
        v = val_loss()
        history.append({"epoch": epoch, "train_loss": total / count, "val_loss": v})
        log.info("world model epoch %d train %.4f val %.4f", epoch, total / count, v)
        if v < best_loss:
            best_loss, best_state = v, {k: p.copy() for k, p in params.items()}
    model.load_parameters(best_state)
    return model.eval(), history


def predict_transitions(model: WorldModel, transitions: Sequence[Transition]) -> np.ndarray:
    data = transition_arrays(transitions)
    return model.predict(data["positions"], data["personalities"])


def round_half_away_array(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def prediction_metrics(pred: np.ndarray, labels: np.ndarray, personalities: np.ndarray) -> list[dict]:
    """Overall and per-personality MAE and rounded accuracy."""
    rows = []
    groups = [("overall", np.ones(len(labels), bool))]
    groups += [(p.label, personalities == p) for p in BENIGN_TYPES]
    for name, mask in groups:
        if not mask.any():
            rows.append({"personality": name, "mae": float("nan"), "accuracy": float("nan"), "n": 0})
            continue
        err = np.abs(pred[mask] - labels[mask])
        acc = np.mean(round_half_away_array(pred[mask]) == labels[mask])
        rows.append({"personality": name, "mae": float(err.mean()), "accuracy": float(acc), "n": int(mask.sum())})
    return rows


def evaluate_world_model(model: WorldModel, transitions: Sequence[Transition]) -> list[dict]:
    if not transitions:
        raise ValueError("empty held-out set")
    data = transition_arrays(transitions)
    pred = model.predict(data["positions"], data["personalities"])
    return prediction_metrics(pred, data["labels"], data["personalities"][:, 0])


def compare_with_baselines(model: WorldModel, heldout: Sequence[Transition], train_label_mean: float) -> list[dict]:
    """Metrics for the model, the persistence baseline (next = current) and a constant training-mean baseline."""
    if not heldout:
        raise ValueError("empty held-out set")
    data = transition_arrays(heldout)
    labels, target_pers = data["labels"], data["personalities"][:, 0]
    preds = {
        "world_model": model.predict(data["positions"], data["personalities"]),
        "persistence": data["positions"][:, 0].astype(np.float32),
        "global_mean": np.full(len(labels), train_label_mean, np.float32),
    }
    rows = []
    for name, pred in preds.items():
        rows += [{"predictor": name, **r} for r in prediction_metrics(pred, labels, target_pers)]
    return rows


def write_eval_csv(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mae": f"{r['mae']:.4f}", "accuracy": f"{r['accuracy']:.4f}"})
    return path


def surrogate_step(model: WorldModel, benign_positions: np.ndarray, benign_personalities: np.ndarray,
                   attacker_position: np.ndarray) -> np.ndarray:
    """Next integer positions of every benign agent, batched over rows.

    Accepts (B, n_benign) arrays and a (B,) attacker position, or the unbatched
    equivalents. Deterministic: dropout is off and no noise is injected.
    """
    pos = np.asarray(benign_positions, dtype=np.int64)
    single = pos.ndim == 1
    pos = np.atleast_2d(pos)
    pers = np.atleast_2d(np.asarray(benign_personalities, dtype=np.int64))
    att = np.atleast_1d(np.asarray(attacker_position, dtype=np.int64))
    B, nb = pos.shape
    full_pos = np.concatenate([pos, att[:, None]], axis=1)
    full_pers = np.concatenate([pers, np.full((B, 1), int(Personality.MALICIOUS))], axis=1)
    xs, ks = zip(*(ordered_batch(full_pos, full_pers, j) for j in range(nb)))
    pred = model.predict(np.concatenate(xs), np.concatenate(ks))
    if not np.all(np.isfinite(pred)):
        raise TrainingError("world model produced a non-finite prediction")
    nxt = np.clip(round_half_away_array(pred), 0, model.L).astype(np.int64).reshape(nb, B).T
    return nxt[0] if single else nxt
