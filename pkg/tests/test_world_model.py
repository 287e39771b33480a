import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insider_consensus.env import EnvConfig, Personality, run_episode
from insider_consensus.harness import collect_corpus
from insider_consensus.nn_core import mse
from insider_consensus.policies import RandomAttacker, scripted_agents
from insider_consensus.world_model import (Transition, WorldModel, WorldModelConfig, build_dataset,
                                           compare_with_baselines, evaluate_world_model, order_slots,
                                           prediction_metrics, sample_weights, surrogate_step, train_world_model,
                                           transition_arrays, write_eval_csv)

S, G, N, M = Personality.STUBBORN, Personality.SUGGESTIBLE, Personality.NEUTRAL, Personality.MALICIOUS
SMALL = WorldModelConfig(embedding_dim=8, hidden_dim=32, dropout=0.0, epochs=8, batch_size=64)


@pytest.fixture(scope="module")
def corpus():
    return collect_corpus(200, seed=7)


@pytest.fixture(scope="module")
def trained(corpus):
    data = build_dataset(corpus)
    model, history = train_world_model(data, 20, SMALL, seed=0)
    return model, history, data


def long_episode(seed=0):
    """An episode of five update rounds (stubborn agents far apart rarely agree)."""
    cfg = EnvConfig(T=5)
    for s in range(seed, seed + 1000):
        traj = run_episode(cfg, scripted_agents([S, S, S]), [S, S, S], [RandomAttacker()], seed=s)
        if len(traj.rounds) == 6:
            return traj
    raise AssertionError("no long episode found")


def test_five_rounds_three_benign_gives_fifteen():
    assert len(build_dataset([long_episode()])) == 15


def test_consensus_at_round_one_gives_three():
    cfg = EnvConfig()
    for s in range(5000):
        traj = run_episode(cfg, scripted_agents([G, G, G]), [G, G, G], [RandomAttacker()], seed=s)
        if traj.consensus_round == 1:
            assert len(build_dataset([traj])) == 3
            return
    pytest.fail("no round-1 consensus found")


def test_single_round_trajectory_contributes_nothing():
    traj = long_episode()
    short = dataclasses.replace(traj, rounds=traj.rounds[:1])
    assert build_dataset([short]) == []


def test_transition_layout_and_attacker_slot():
    traj = long_episode()
    data = build_dataset([traj])
    cur, nxt = traj.rounds[0], traj.rounds[1]
    for t in data[:3]:
        assert len(t.positions) == 4 and t.personalities[0] != M
        assert t.positions[0] == cur.positions[t.target_id]
        assert t.label == nxt.positions[t.target_id]
        # the insider's declaration made during the step is what the benign agents saw
        assert t.attacker_position == nxt.positions[3]
        assert t.personalities.count(int(M)) == 1


def test_tail_order_is_canonical():
    a = order_slots([5, 9, 1, 12], [int(S), int(N), int(S), int(M)], 0)
    b = order_slots([5, 1, 9, 12], [int(S), int(S), int(N), int(M)], 0)
    assert a == b == ((5, 1, 9, 12), (int(S), int(S), int(N), int(M)))


@given(st.lists(st.integers(0, 20), min_size=4, max_size=4), st.randoms())
def test_tail_permutation_leaves_prediction_unchanged(pos, rnd):
    model = WorldModel(4, 20, SMALL, seed=1)
    kinds = [int(S), int(G), int(N), int(M)]
    tail = list(zip(pos[1:], kinds[1:]))
    rnd.shuffle(tail)
    p2 = [pos[0]] + [p for p, _ in tail]
    k2 = [kinds[0]] + [k for _, k in tail]
    x1, t1 = order_slots(pos, kinds, 0)
    x2, t2 = order_slots(p2, k2, 0)
    assert model.predict(np.array([x1]), np.array([t1]))[0] == model.predict(np.array([x2]), np.array([t2]))[0]


def test_zero_heads_predict_zero():
    model = WorldModel(4, 20, SMALL, seed=0)
    for name, p in model.parameters().items():
        if name.startswith("heads."):
            p[...] = 0
    out = model.predict(np.array([[3, 4, 5, 6]] * 3), np.array([[0, 1, 2, 3], [1, 0, 2, 3], [2, 0, 1, 3]]))
    np.testing.assert_array_equal(out, 0.0)


def test_malicious_target_rejected():
    model = WorldModel(4, 20, SMALL)
    with pytest.raises(ValueError):
        model.predict(np.array([[1, 2, 3, 4]]), np.array([[int(M), 0, 1, 2]]))


def test_head_routing_gradient_sparsity():
    model = WorldModel(4, 20, SMALL, seed=2)
    x = np.array([[4, 8, 12, 16]])
    for k in (S, G, N):
        model.zero_grad()
        kinds = np.array([[int(k), int(S), int(N), int(M)]])
        model.backward(np.ones_like(model.forward(x, kinds)))
        for name, g in model.gradients().items():
            if name.startswith("heads."):
                head = int(name.split(".")[1])
                assert (np.abs(g).sum() > 0) == (head == int(k)), name


def test_suggestible_weight_algebra():
    cfg = WorldModelConfig()
    kinds = np.array([int(G)] * 4 + [int(S)] * 4)
    pred, target = np.arange(8, dtype=np.float64), np.zeros(8)
    w = sample_weights(kinds, cfg)
    weighted, _ = mse(pred[:4], target[:4], w[:4])
    plain, _ = mse(pred[:4], target[:4])
    assert weighted == pytest.approx(3 * plain)
    assert mse(pred[4:], target[4:], w[4:])[0] == pytest.approx(mse(pred[4:], target[4:])[0])


def test_memorizes_repeated_transition():
    t = Transition(0, (4, 10, 15, 20), (int(G), int(S), int(N), int(M)), 20, 11)
    cfg = dataclasses.replace(SMALL, epochs=200, batch_size=16, lr_start=3e-3, lr_end=1e-3)
    model, history = train_world_model([t] * 50, 20, cfg, seed=0)
    assert min(r["val_loss"] for r in history) < 1e-2


def test_training_is_seeded(corpus):
    data = build_dataset(corpus[:30])
    cfg = dataclasses.replace(SMALL, epochs=2)
    a, ha = train_world_model(data, 20, cfg, seed=3)
    b, hb = train_world_model(data, 20, cfg, seed=3)
    assert ha == hb
    for (n1, p1), (n2, p2) in zip(a.parameters().items(), b.parameters().items()):
        np.testing.assert_array_equal(p1, p2)


def test_best_checkpoint_not_worse_than_final(trained):
    _, history, _ = trained
    assert min(r["val_loss"] for r in history) <= history[-1]["val_loss"]
    assert all(np.isfinite(r["train_loss"]) and np.isfinite(r["val_loss"]) for r in history)


def test_training_loss_decreases_early(trained):
    _, history, _ = trained
    assert history[4]["train_loss"] < history[0]["train_loss"]


def test_trained_model_beats_baselines(trained, corpus):
    model, _, data = trained
    heldout = build_dataset(collect_corpus(60, seed=7, stream=1))
    rows = compare_with_baselines(model, heldout, float(np.mean([t.label for t in data])))
    overall = {r["predictor"]: r["mae"] for r in rows if r["personality"] == "overall"}
    assert overall["world_model"] < overall["persistence"]
    assert overall["world_model"] < overall["global_mean"]


def test_snapshot_roundtrip(trained):
    model, _, data = trained
    clone = WorldModel.from_params(model.snapshot())
    arr = transition_arrays(data[:50])
    np.testing.assert_array_equal(model.predict(arr["positions"], arr["personalities"]),
                                  clone.predict(arr["positions"], arr["personalities"]))


def test_surrogate_contracts_at_agreement(trained):
    model, _, _ = trained
    kinds = [int(S), int(G), int(N), int(M)]
    for p in (5, 10, 15):
        rows = [order_slots([p] * 4, kinds, j) for j in range(3)]
        pred = model.predict(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]))
        assert np.all(np.abs(pred - p) < 1), (p, pred)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=3, max_size=3), st.integers(0, 20),
       st.lists(st.sampled_from([0, 1, 2]), min_size=3, max_size=3))
def test_surrogate_step_in_range_and_deterministic(trained_model, pos, att, kinds):
    a = surrogate_step(trained_model, np.array(pos), np.array(kinds), att)
    b = surrogate_step(trained_model, np.array(pos), np.array(kinds), att)
    assert a.shape == (3,) and np.all((a >= 0) & (a <= 20))
    np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def trained_model(trained):
    return trained[0]


def test_surrogate_batch_matches_rows(trained_model):
    rng = np.random.default_rng(0)
    pos, kinds, att = rng.integers(0, 21, (6, 3)), rng.integers(0, 3, (6, 3)), rng.integers(0, 21, 6)
    batch = surrogate_step(trained_model, pos, kinds, att)
    for i in range(6):
        np.testing.assert_array_equal(batch[i], surrogate_step(trained_model, pos[i], kinds[i], att[i]))


def test_surrogate_rejects_non_finite():
    model = WorldModel(4, 20, SMALL)
    next(iter(model.parameters().values()))[...] = np.nan
    with pytest.raises(Exception, match="non-finite"):
        surrogate_step(model, np.array([1, 2, 3]), np.array([0, 1, 2]), 4)


def test_metrics_perfect_and_constant_oracle():
    labels = np.arange(21, dtype=np.float64)
    kinds = np.zeros(21, dtype=int)
    perfect = prediction_metrics(labels.copy(), labels, kinds)[0]
    assert perfect["mae"] == 0.0 and perfect["accuracy"] == 1.0
    const = prediction_metrics(np.full(21, 10.0), labels, kinds)[0]
    assert const["mae"] == pytest.approx(110 / 21)
    assert const["mae"] == pytest.approx(5.238, abs=1e-3)


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate_world_model(WorldModel(4, 20, SMALL), [])


def test_eval_csv_columns(tmp_path, trained):
    model, _, data = trained
    rows = compare_with_baselines(model, data[:40], 10.0)
    text = write_eval_csv(tmp_path / "sub" / "wm.csv", rows).read_text().splitlines()
    assert text[0] == "predictor,personality,mae,accuracy,n"
    assert len(text) == 1 + 3 * 4


def test_transition_json_roundtrip():
    t = Transition(2, (1, 2, 3, 4), (0, 1, 2, 3), 4, 5)
    assert Transition.from_json(t.to_json()) == t


def test_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        WorldModelConfig(epochs=-1)
    with pytest.raises(ValueError):
        WorldModelConfig(val_split=1.0)
