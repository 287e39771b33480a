import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from insider_consensus import attacker as atk
from insider_consensus.attacker import (DqnConfig, QNetwork, ReplayBuffer, RLAttacker, SurrogateEnv,
                                        act_epsilon_greedy, deploy_attacker, encode_states, evaluate_surrogate,
                                        greedy_actions, greedy_policy, random_policy, state_dim, td_targets,
                                        td_update, train_attacker, write_curve_csv)
from insider_consensus.env import EnvConfig, Personality, RewardConfig
from insider_consensus.nn_core import Adam, LinearSchedule, TrainingError
from insider_consensus.world_model import WorldModel, WorldModelConfig

S, G, N = Personality.STUBBORN, Personality.SUGGESTIBLE, Personality.NEUTRAL
ENV = EnvConfig()
TINY = DqnConfig(hidden=(16,), buffer_size=200, learning_starts=80, batch_size=16, total_steps=400,
                 n_parallel_envs=4, eval_every=160, eval_episodes=5, target_update_every=10)


@pytest.fixture(scope="module")
def wm():
    return WorldModel(4, 20, WorldModelConfig(embedding_dim=4, hidden_dim=8, dropout=0.0), seed=0).eval()


def test_state_dimension():
    assert state_dim(3) == 14
    x = encode_states(np.array([20, 0, 10]), np.array([2, 0, 1]), np.array([5]), np.array([3]), 20, 10)
    assert x.shape == (1, 14)
    np.testing.assert_allclose(x[0, :3], [0.0, 0.5, 1.0])
    np.testing.assert_allclose(x[0, -2:], [0.25, 0.3])


def test_state_ignores_agent_order():
    a = encode_states(np.array([3, 9, 14]), np.array([1, 0, 2]), np.array([0]), np.array([1]), 20, 10)
    b = encode_states(np.array([14, 3, 9]), np.array([2, 1, 0]), np.array([0]), np.array([1]), 20, 10)
    np.testing.assert_array_equal(a, b)


def test_epsilon_one_is_uniform():
    qnet = QNetwork(14, 21, (8,), seed=0)
    acts = act_epsilon_greedy(qnet, np.zeros((10_000, 14), np.float32), 1.0, np.random.default_rng(0))
    counts = np.bincount(acts, minlength=21)
    assert stats.chisquare(counts).pvalue > 0.001


def test_epsilon_zero_is_greedy_and_deterministic():
    qnet = QNetwork(14, 21, (8,), seed=0)
    x = np.random.default_rng(1).random((5, 14)).astype(np.float32)
    a = act_epsilon_greedy(qnet, x, 0.0, np.random.default_rng(0))
    b = act_epsilon_greedy(qnet, x, 0.0, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, greedy_actions(qnet.forward(x)))


def test_epsilon_out_of_range():
    with pytest.raises(ValueError):
        act_epsilon_greedy(QNetwork(14, 21, (8,)), np.zeros((1, 14)), 1.5, np.random.default_rng(0))


@given(st.lists(st.integers(-1000, 1000), min_size=21, max_size=21, unique=True), st.integers(1, 50),
       st.integers(-100, 100))
def test_argmax_affine_invariance(q, scale, shift):
    q = np.array(q, dtype=np.float64)
    assert greedy_actions(q) == greedy_actions(scale * q + shift) == greedy_actions(q + shift)


def test_argmax_ties_go_low():
    assert greedy_actions(np.array([1.0, 3.0, 3.0, 0.0])) == 1
    assert greedy_actions(np.zeros(21)) == 0


def test_terminal_targets_equal_reward():
    target = QNetwork(14, 21, (8,), seed=3)
    y = td_targets(target, np.full(4, -10.0), np.random.default_rng(0).random((4, 14)), np.ones(4), 0.99)
    np.testing.assert_array_equal(y, -10.0)


def test_gamma_zero_targets_equal_reward():
    target = QNetwork(14, 21, (8,), seed=3)
    r = np.array([1.0, 0.0, -10.0])
    np.testing.assert_allclose(td_targets(target, r, np.ones((3, 14)), np.zeros(3), 0.0), r)


def test_bootstrap_target():
    target = QNetwork(14, 21, (8,), seed=3)
    s2 = np.random.default_rng(2).random((2, 14)).astype(np.float32)
    y = td_targets(target, np.array([1.0, 1.0]), s2, np.array([0.0, 1.0]), 0.5)
    assert y[0] == pytest.approx(1.0 + 0.5 * target.forward(s2)[0].max(), rel=1e-6)
    assert y[1] == 1.0


def repeated_batch(reward, done, n=16):
    s = np.full((n, 14), 0.3, np.float32)
    return {"states": s, "actions": np.full(n, 7), "rewards": np.full(n, reward, np.float32),
            "next_states": s, "dones": np.full(n, done, np.float32)}


def test_td_update_fixed_point():
    qnet = QNetwork(14, 21, (32,), seed=0)
    target = qnet.copy()
    opt = Adam(qnet.parameters(), 1e-3)
    grads = qnet.gradients()
    batch = repeated_batch(2.5, 1.0)
    for step in range(5000):
        td_update(qnet, target, batch, 0.99, opt, step, grads)
    assert abs(qnet.forward(batch["states"][:1])[0, 7] - 2.5) < 1e-2


def test_td_update_leaves_target_frozen():
    qnet = QNetwork(14, 21, (8,), seed=0)
    target = qnet.copy()
    before = {k: v.copy() for k, v in target.parameters().items()}
    opt = Adam(qnet.parameters(), 1e-2)
    td_update(qnet, target, repeated_batch(1.0, 0.0), 0.9, opt)
    for k, v in target.parameters().items():
        np.testing.assert_array_equal(v, before[k])
    assert any(not np.array_equal(qnet.parameters()[k], before[k]) for k in before)


def test_td_update_nan_aborts():
    qnet = QNetwork(14, 21, (8,), seed=0)
    batch = repeated_batch(np.nan, 1.0)
    with pytest.raises(TrainingError, match="update 12"):
        td_update(qnet, qnet.copy(), batch, 0.9, Adam(qnet.parameters(), 1e-3), step=12)


def test_buffer_ring_and_capacity():
    buf = ReplayBuffer(5, 2)
    for i in range(12):
        buf.add([[i, i]], [i], [float(i)], [[i, i]], [0.0])
        assert len(buf) <= 5
    assert sorted(buf.actions.tolist()) == [7, 8, 9, 10, 11]


def test_buffer_sampling_is_uniform_without_replacement():
    buf = ReplayBuffer(50, 1)
    buf.add(np.zeros((50, 1)), np.arange(50), np.zeros(50), np.zeros((50, 1)), np.zeros(50))
    rng = np.random.default_rng(0)
    counts = np.zeros(50)
    for _ in range(2000):
        idx = buf.sample(10, rng)["indices"]
        assert len(set(idx.tolist())) == 10
        counts[idx] += 1
    assert stats.chisquare(counts).pvalue > 0.001


def test_buffer_rejects_oversample():
    with pytest.raises(ValueError):
        ReplayBuffer(10, 1).sample(1, np.random.default_rng(0))


def test_epsilon_schedule_end_point():
    cfg = DqnConfig()
    eps = LinearSchedule(cfg.epsilon_start, cfg.epsilon_end, cfg.total_steps, cfg.epsilon_fraction)
    assert eps.value(0) == 1.0
    assert eps.value(cfg.total_steps // 2) == 0.05
    assert eps.value(cfg.total_steps) == 0.05


def test_dqn_config_validation():
    with pytest.raises(ValueError):
        DqnConfig(learning_starts=10, total_steps=5)
    with pytest.raises(ValueError):
        DqnConfig(buffer_size=10, batch_size=128)


def test_surrogate_done_at_horizon(wm, monkeypatch):
    monkeypatch.setattr(atk, "surrogate_step", lambda m, pos, pers, a: np.tile([2, 9, 15], (len(pos), 1)))
    env = SurrogateEnv(wm, 1, ENV, RewardConfig(), np.random.default_rng(0))
    for t in range(1, ENV.T + 1):
        _, r, done, cons, finished = env.step(np.array([4]))
        assert r[0] == 1.0 and not cons[0]
        assert done[0] == (t == ENV.T)
    assert finished == [float(ENV.T)]


def test_surrogate_consensus_penalty(wm, monkeypatch):
    monkeypatch.setattr(atk, "surrogate_step", lambda m, pos, pers, a: np.full((len(pos), 3), 6))
    env = SurrogateEnv(wm, 3, ENV, RewardConfig(), np.random.default_rng(0))
    _, r, done, cons, finished = env.step(np.array([0, 10, 20]))
    assert np.all(r == -10.0) and done.all() and cons.all() and finished == [-10.0] * 3


def test_surrogate_resets_and_validates(wm):
    env = SurrogateEnv(wm, 4, ENV, RewardConfig(), np.random.default_rng(0))
    assert all(len(set(row)) > 1 for row in env.pos.tolist())
    assert env.states().shape == (4, 14)
    with pytest.raises(ValueError):
        env.step(np.array([0, 0, 0, 21]))


def test_paired_surrogate_evaluation(wm):
    a = evaluate_surrogate(wm, random_policy(20), 20, ENV, RewardConfig(), seed=5)
    b = evaluate_surrogate(wm, random_policy(20), 20, ENV, RewardConfig(), seed=5)
    np.testing.assert_array_equal(a["returns"], b["returns"])
    assert 0 <= a["consensus_rate"] <= 1


def test_training_is_reproducible(wm, tmp_path):
    r1 = train_attacker(wm, TINY, ENV, RewardConfig(), seed=4)
    r2 = train_attacker(wm, TINY, ENV, RewardConfig(), seed=4)
    assert r1.curve == r2.curve and r1.best_step == r2.best_step
    assert [row["step"] for row in r1.curve] == [160, 320, 400]
    assert r1.best_step >= TINY.learning_starts
    lines = write_curve_csv(tmp_path / "curve.csv", r1.curve).read_text().splitlines()
    assert lines[0] == "step,epsilon,mean_return,eval_return,surrogate_CR" and len(lines) == 4


def test_target_sync(wm, monkeypatch):
    """The target equals the online net right after every sync and is otherwise constant."""
    snapshots = []
    real = atk.td_update

    def spy(qnet, target, batch, gamma, opt, step=0, grads=None):
        snapshots.append((step, {k: v.copy() for k, v in target.parameters().items()},
                          {k: v.copy() for k, v in qnet.parameters().items()}))
        return real(qnet, target, batch, gamma, opt, step, grads)

    monkeypatch.setattr(atk, "td_update", spy)
    train_attacker(wm, TINY, ENV, RewardConfig(), seed=1)
    every = TINY.target_update_every
    prev = snapshots[0][1]
    for step, tgt, online in snapshots[1:]:
        # a sync happens right after the update that precedes a multiple of ``every``
        ref = online if step % every == 0 else prev
        for k in tgt:
            np.testing.assert_array_equal(tgt[k], ref[k])
        prev = tgt
    assert any(step > 0 and step % every == 0 for step, _, _ in snapshots)


def test_divergence_aborts(wm, monkeypatch):
    base = atk.QNetwork

    class Huge(base):
        def __init__(self, *args, **kwargs):
            super().__init__(*args, **kwargs)
            for p in self.parameters().values():
                p *= 1e5

    monkeypatch.setattr(atk, "QNetwork", Huge)
    with pytest.raises(TrainingError, match="diverged"):
        train_attacker(wm, TINY, ENV, RewardConfig(), seed=0)


class PerfectClassifier:
    """Stand-in returning one-hot ground truth for every example."""

    class config:
        max_rounds = None

    def classify(self, examples):
        return np.eye(3)[[e.label for e in examples]]


def test_true_and_perfectly_inferred_match():
    qnet = QNetwork(14, 21, (16,), seed=2).eval()
    pers = [S, G, N]
    seeds = [11, 12, 13]
    a = deploy_attacker(qnet, pers, ENV, seeds, "true")
    b = deploy_attacker(qnet, pers, ENV, seeds, "inferred", PerfectClassifier(), profiling_seed=99)
    assert a.profiling is None and b.profiling is not None
    assert b.believed_personalities == tuple(pers)
    assert [t.to_json() for t in a.trajectories] == [t.to_json() for t in b.trajectories]


def test_deployment_positions_in_range():
    qnet = QNetwork(14, 21, (16,), seed=2).eval()
    dep = deploy_attacker(qnet, [S, S, G], ENV, list(range(10)), "true")
    assert len(dep.trajectories) == 10
    for t in dep.trajectories:
        assert all(0 <= p <= 20 for r in t.rounds for p in r.positions)


def test_inferred_needs_classifier():
    with pytest.raises(ValueError):
        deploy_attacker(QNetwork(14, 21, (8,)), [S, G, N], ENV, [1], "inferred", None, 5)


def test_rl_attacker_message_from_malicious_pool():
    from insider_consensus.env import AttackerObservation
    from insider_consensus.policies import PHRASE_POOLS
    obs = AttackerObservation(0, (3, 9, 15), (S, G, N), 1, 20, 10)
    tokens, pos = RLAttacker(QNetwork(14, 21, (8,), seed=1)).act(obs, np.random.default_rng(0))
    assert 0 <= pos <= 20 and " ".join(tokens[:-1]) in PHRASE_POOLS[Personality.MALICIOUS]
    assert tokens[-1] == f"pos_{pos}"
