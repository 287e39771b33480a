"""Behavioural-attribute classifier: personality from one episode of one agent.

Three encoders are concatenated before a small head. A recurrent trajectory
encoder reads (position, bucketed delta) embeddings, a dense layer reads nine
handcrafted summary features, and a recurrent message encoder reads one vector
per message. Message vectors come from a hashed bag of tokens (sum of token
embeddings), which stands in for a pretrained sentence encoder and sits behind
``HashedBagEncoder`` so another backend can replace it.
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import BENIGN_TYPES, Personality, Trajectory
from .nn_core import (GRU, Adam, Dense, Dropout, Embedding, LinearSchedule, ModelParams, Module, Sequential,
                      TrainingError, softmax, weighted_cross_entropy)

log = logging.getLogger(__name__)

N_FEATURES = 9
DELTA_BUCKETS = 7  # {<=-3, -2, -1, 0, +1, +2, >=+3}


@dataclass(frozen=True)
class ClassifierConfig:
    position_embedding_dim: int = 16
    trajectory_hidden: int = 32
    summary_hidden: int = 32
    token_embedding_dim: int = 64
    hash_buckets: int = 1024
    message_hidden: int = 128
    head_hidden: int = 128
    classes: int = 3
    dropout: float = 0.2
    epochs: int = 20
    batch_size: int = 16
    weight_decay: float = 1e-5
    lr_start: float = 2e-4
    lr_end: float = 5e-5
    val_split: float = 0.1
    early_stop_patience: int = 15
    max_messages: int = 10
    max_tokens_per_message: int = 48
    max_rounds: int | None = None  # None reads the whole episode
    decoupled_weight_decay: bool = False

    def __post_init__(self) -> None:
        for name, v in asdict(self).items():
            if name in ("dropout", "weight_decay", "decoupled_weight_decay", "max_rounds"):
                continue
            if v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if self.classes != len(BENIGN_TYPES):
            raise ValueError("classes must equal the number of benign personalities")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.max_rounds is not None and self.max_rounds < 0:
            raise ValueError("max_rounds must be nonnegative")


@dataclass(frozen=True)
class SummaryFeatures:
    initial: float
    final: float
    net_displacement: float
    total_movement: float
    average_movement: float
    max_movement: float
    unique_positions: int
    direction_changes: int
    length: int

    def as_tuple(self) -> tuple:
        return tuple(asdict(self).values())


def summary_features(positions: Sequence[int]) -> SummaryFeatures:
    pos = np.asarray(positions, dtype=np.float64)
    if pos.size == 0:
        raise ValueError("summary_features needs at least one position")
    moves = np.diff(pos)
    mags = np.abs(moves)
    signs = np.sign(moves[moves != 0])
    changes = int(np.sum(signs[:-1] * signs[1:] < 0)) if signs.size > 1 else 0
    return SummaryFeatures(
        initial=float(pos[0]),
        final=float(pos[-1]),
        net_displacement=float(pos[-1] - pos[0]),
        total_movement=float(mags.sum()),
        average_movement=float(mags.mean()) if mags.size else 0.0,
        max_movement=float(mags.max()) if mags.size else 0.0,
        unique_positions=int(np.unique(pos).size),
        direction_changes=changes,
        length=int(pos.size),
    )


def normalized_features(positions: Sequence[int], L: int, T: int) -> np.ndarray:
    f = summary_features(positions)
    horizon = T + 1
    return np.array([
        f.initial / L, f.final / L, f.net_displacement / L, f.total_movement / (L * T),
        f.average_movement / L, f.max_movement / L, f.unique_positions / horizon,
        f.direction_changes / T, f.length / horizon,
    ], dtype=np.float32)


def delta_bucket(deltas: np.ndarray) -> np.ndarray:
    return np.clip(deltas, -3, 3).astype(np.int64) + 3


def token_bucket(token: str, buckets: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % buckets


@dataclass(frozen=True)
class Example:
    positions: tuple[int, ...]
    messages: tuple[tuple[str, ...], ...]
    label: int | None = None


def episode_examples(trajectory: Trajectory, max_rounds: int | None = None,
                     agent_ids: Sequence[int] | None = None) -> list[Example]:
    """One example per benign agent, optionally cut to the first ``max_rounds`` updates."""
    if agent_ids is None:
        agent_ids = [i for i, p in enumerate(trajectory.personalities) if p != Personality.MALICIOUS]
    out = []
    for i in agent_ids:
        pos = trajectory.positions_of(i)
        msgs = trajectory.messages_of(i)
        if max_rounds is not None:
            pos, msgs = pos[:max_rounds + 1], msgs[:max_rounds]
        label = trajectory.personalities[i]
        out.append(Example(tuple(pos), tuple(tuple(m) for m in msgs),
                           int(label) if label != Personality.MALICIOUS else None))
    return out


def encode_examples(examples: Sequence[Example], config: ClassifierConfig, L: int, T: int) -> dict[str, np.ndarray]:
    """Pad a list of examples into fixed arrays. Over-long inputs are truncated, keeping the first items."""
    if not examples:
        raise ValueError("no examples to encode")
    B = len(examples)
    S = max(len(e.positions) for e in examples)
    M, K = config.max_messages, config.max_tokens_per_message
    pos = np.zeros((B, S), np.int64)
    dbk = np.full((B, S), 3, np.int64)
    lengths = np.zeros(B, np.int64)
    feats = np.zeros((B, N_FEATURES), np.float32)
    tok = np.zeros((B, M, K), np.int64)
    mask = np.zeros((B, M, K), np.float32)
    n_msg = np.zeros(B, np.int64)
    for b, e in enumerate(examples):
        p = np.asarray(e.positions, np.int64)
        if p.size == 0:
            raise ValueError("example has no positions")
        if p.min() < 0 or p.max() > L:
            raise ValueError(f"positions outside [0, {L}]")
        pos[b, :p.size] = p
        dbk[b, 1:p.size] = delta_bucket(np.diff(p))
        lengths[b] = p.size
        feats[b] = normalized_features(p, L, T)
        msgs = e.messages[:M]
        n_msg[b] = len(msgs)
        for m, tokens in enumerate(msgs):
            ids = [token_bucket(t, config.hash_buckets) for t in tokens[:K]]
            tok[b, m, :len(ids)] = ids
            mask[b, m, :len(ids)] = 1.0
    labels = np.array([-1 if e.label is None else e.label for e in examples], np.int64)
    return {"pos": pos, "dbk": dbk, "lengths": lengths, "feats": feats, "tok": tok, "mask": mask,
            "n_msg": n_msg, "labels": labels}


def take(batch: dict[str, np.ndarray], idx: np.ndarray) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in batch.items()}


class HashedBagEncoder(Module):
    """Message -> vector as the sum of hashed-token embeddings."""

    def __init__(self, buckets: int, dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.dim = dim
        self.table = Embedding(buckets, dim, rng=rng)

    def forward(self, tok: np.ndarray, mask: np.ndarray) -> np.ndarray:
        self._mask = mask[..., None]
        return (self.table.forward(tok) * self._mask).sum(axis=2)

    def backward(self, dout: np.ndarray) -> None:
        self.table.backward(dout[:, :, None, :] * self._mask)


class AttributeClassifier(Module):
    def __init__(self, L: int, T: int, config: ClassifierConfig = ClassifierConfig(), seed: int = 0) -> None:
        super().__init__()
        rng = np.random.default_rng(seed)
        c = config
        self.L, self.T, self.config = L, T, config
        self.pos_emb = Embedding(L + 1, c.position_embedding_dim, rng=rng)
        self.delta_emb = Embedding(DELTA_BUCKETS, c.position_embedding_dim, rng=rng)
        self.traj_gru = GRU(2 * c.position_embedding_dim, c.trajectory_hidden, rng=rng)
        self.feat_mlp = Dense(N_FEATURES, c.summary_hidden, "relu", rng=rng)
        self.msg_enc = HashedBagEncoder(c.hash_buckets, c.token_embedding_dim, rng)
        self.msg_gru = GRU(c.token_embedding_dim, c.message_hidden, rng=rng)
        self.head = Sequential(
            Dense(c.trajectory_hidden + c.summary_hidden + c.message_hidden, c.head_hidden, "relu", rng=rng),
            Dropout(c.dropout, rng=np.random.default_rng(rng.integers(2**63))),
            Dense(c.head_hidden, c.classes, rng=rng),
        )

    def forward(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        x = np.concatenate([self.pos_emb.forward(batch["pos"]), self.delta_emb.forward(batch["dbk"])], axis=-1)
        ht = self.traj_gru.forward(x, batch["lengths"])
        hf = self.feat_mlp.forward(batch["feats"])
        hm = self.msg_gru.forward(self.msg_enc.forward(batch["tok"], batch["mask"]), batch["n_msg"])
        self._split = (ht.shape[1], ht.shape[1] + hf.shape[1])
        return self.head.forward(np.concatenate([ht, hf, hm], axis=1))

    def backward(self, dlogits: np.ndarray) -> None:
        dz = self.head.backward(dlogits)
        a, b = self._split
        dx = self.traj_gru.backward(dz[:, :a])
        d = self.config.position_embedding_dim
        self.pos_emb.backward(dx[..., :d])
        self.delta_emb.backward(dx[..., d:])
        self.feat_mlp.backward(dz[:, a:b])
        self.msg_enc.backward(self.msg_gru.backward(dz[:, b:]))

    def predict_proba(self, batch: dict[str, np.ndarray]) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            return softmax(self.forward(batch))
        finally:
            self.train(was)

    def classify(self, examples: Sequence[Example]) -> np.ndarray:
        """Class probabilities, one row per example, ordered as ``BENIGN_TYPES``."""
        return self.predict_proba(encode_examples(examples, self.config, self.L, self.T))

    def hyperparameters(self) -> dict:
        return {"L": self.L, "T": self.T, **asdict(self.config)}

    def snapshot(self) -> ModelParams:
        return ModelParams.from_module("classifier", self.hyperparameters(), self)

    @classmethod
    def from_params(cls, params: ModelParams) -> "AttributeClassifier":
        hp = dict(params.hyperparameters)
        L, T = hp.pop("L"), hp.pop("T")
        return params.load_into(cls(L, T, ClassifierConfig(**hp))).eval()


def class_weights(labels: np.ndarray, classes: int = 3) -> np.ndarray:
    """alpha_c = N / (C * N_c)."""
    counts = np.bincount(labels, minlength=classes)
    if np.any(counts == 0):
        missing = [BENIGN_TYPES[c].label for c in np.flatnonzero(counts == 0)]
        raise ValueError(f"training data has no examples of class(es) {missing}")
    return (len(labels) / (classes * counts)).astype(np.float32)


def stratified_split(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    val, train = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = min(max(1, int(round(fraction * idx.size))), idx.size - 1)
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def train_classifier(examples: Sequence[Example], L: int, T: int, config: ClassifierConfig = ClassifierConfig(),
                     seed: int = 0) -> tuple[AttributeClassifier, list[dict]]:
    """Weighted cross-entropy training with early stopping on validation accuracy."""
    labels = np.array([e.label for e in examples], np.int64)
    if np.any(labels < 0):
        raise ValueError("every training example needs a benign label")
    counts = np.bincount(labels, minlength=config.classes)
    if np.any(counts < 3):
        raise ValueError(f"need at least 3 examples per class, got counts {counts.tolist()}")
    rng = np.random.default_rng(seed)
    data = encode_examples(examples, config, L, T)
    train_idx, val_idx = stratified_split(labels, config.val_split, rng)
    alpha = class_weights(labels[train_idx], config.classes)

    model = AttributeClassifier(L, T, config, seed=int(rng.integers(2**31)))
    params, grads = model.parameters(), model.gradients()
    opt = Adam(params, config.lr_start, config.weight_decay, decoupled=config.decoupled_weight_decay)
    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    schedule = LinearSchedule(config.lr_start, config.lr_end, config.epochs * steps_per_epoch)
    val_batch = take(data, val_idx)

    history: list[dict] = []
    best_key, best_state, stale, step = None, None, 0, 0
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(train_idx)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = take(data, idx)
            model.zero_grad()
            loss, dlogits = weighted_cross_entropy(model.forward(batch), batch["labels"], alpha)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite classifier loss at epoch {epoch} batch {b}")
            model.backward(dlogits)
            opt.step(grads, lr=schedule.value(step))
            step += 1
            total += loss * len(idx)
        model.eval()
        logits = model.forward(val_batch)
        v_loss = weighted_cross_entropy(logits, val_batch["labels"], alpha)[0]
        v_acc = float(np.mean(np.argmax(logits, axis=1) == val_batch["labels"]))
        history.append({"epoch": epoch, "train_loss": total / len(train_idx), "val_loss": v_loss, "val_accuracy": v_acc})
        log.info("classifier epoch %d train %.4f val %.4f acc %.3f", epoch, total / len(train_idx), v_loss, v_acc)
        key = (v_acc, -v_loss)
        if best_key is None or key > best_key:
            best_key, best_state, stale = key, {k: p.copy() for k, p in params.items()}, 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    model.load_parameters(best_state)
    return model.eval(), history


def infer_episode_attributes(model: AttributeClassifier, trajectory: Trajectory, agent_id: int) -> Personality:
    if not 0 <= agent_id < len(trajectory.personalities):
        raise ValueError(f"agent {agent_id} is not in the trajectory")
    ex = episode_examples(trajectory, model.config.max_rounds, [agent_id])
    return BENIGN_TYPES[int(np.argmax(model.classify(ex)[0]))]


def infer_personalities(model: AttributeClassifier, trajectory: Trajectory,
                        agent_ids: Sequence[int]) -> tuple[Personality, ...]:
    probs = model.classify(episode_examples(trajectory, model.config.max_rounds, agent_ids))
    return tuple(BENIGN_TYPES[int(k)] for k in np.argmax(probs, axis=1))


def classification_report(pred: np.ndarray, labels: np.ndarray) -> list[dict]:
    rows = []
    for c, p in enumerate(BENIGN_TYPES):
        tp = int(np.sum((pred == c) & (labels == c)))
        n_pred, n = int(np.sum(pred == c)), int(np.sum(labels == c))
        rows.append({"class": p.label, "precision": tp / n_pred if n_pred else 0.0,
                     "recall": tp / n if n else 0.0, "n": n})
    rows.append({"class": "overall", "precision": float(np.mean(pred == labels)) if len(labels) else 0.0,
                 "recall": float(np.mean(pred == labels)) if len(labels) else 0.0, "n": int(len(labels))})
    return rows


def evaluate_classifier(model: AttributeClassifier, examples: Sequence[Example]) -> list[dict]:
    labels = np.array([e.label for e in examples], np.int64)
    pred = np.argmax(model.classify(examples), axis=1)
    return classification_report(pred, labels)


def write_classifier_csv(path: str | Path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["class", "precision", "recall", "n"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"class": r["class"], "precision": f"{r['precision']:.4f}",
                        "recall": f"{r['recall']:.4f}", "n": r["n"]})
    return path
