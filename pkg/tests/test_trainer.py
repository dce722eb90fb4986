import math

import numpy as np
import pytest

from notifrl.config import TrainConfig
from notifrl.errors import DataError, DivergenceError, SupportError
from notifrl.mdp import Action, TransitionTable
from notifrl.nn import MlpParams, init_mlp, mlp_backward, mlp_forward
from notifrl.trainer import (
    Batch,
    QPolicy,
    Smoothing,
    cql_loss,
    cql_loss_with_targets,
    cql_penalty,
    ddqn_target,
    dqn_target,
    greedy_action,
    policy_propensity,
    train,
)

from oracles import CHAIN_STATES, central_difference, chain_table, relative_errors, value_iteration


def q_table_net(q):
    """Linear layer whose output on one-hot state i is row i of ``q``."""
    q = np.asarray(q, dtype=np.float64)
    return MlpParams([q.shape[0], 2], [q.copy()], [np.zeros(2)])


def one_hot_batch(s, a, r, s_next, dt=1.0, terminal=False, n_states=2):
    eye = np.eye(n_states)
    return Batch(eye[[s]], np.array([a]), np.array([float(r)]), eye[[s_next]], np.array([dt]),
                 np.array([terminal]))


class TestTargets:
    def test_terminal_drops_bootstrap(self):
        b = one_hot_batch(0, 0, 1.5, 1, terminal=True)
        assert dqn_target(b, q_table_net([[0, 0], [9, 9]]), 0.9).tolist() == [1.5]

    def test_zero_network(self):
        b = one_hot_batch(0, 1, 0.7, 1)
        assert dqn_target(b, q_table_net(np.zeros((2, 2))), 0.9).tolist() == [0.7]

    def test_hand_evaluated_dqn(self):
        b = one_hot_batch(0, 0, 1.0, 1)
        assert dqn_target(b, q_table_net([[0, 0], [2, -1]]), 0.5).tolist() == [2.0]

    def test_non_uniform_discount(self):
        b = one_hot_batch(0, 0, 0.0, 1, dt=3.0)
        assert dqn_target(b, q_table_net([[0, 0], [1, 0]]), 0.5)[0] == pytest.approx(0.125)

    def test_ddqn_equals_dqn_when_networks_match(self):
        rng = np.random.default_rng(0)
        p = init_mlp([3, 5, 2], rng)
        b = Batch(rng.normal(size=(6, 3)), rng.integers(0, 2, 6), rng.normal(size=6),
                  rng.normal(size=(6, 3)), rng.uniform(0.1, 5, 6), np.array([0, 0, 1, 0, 0, 1], bool))
        assert np.array_equal(ddqn_target(b, p, p.copy(), 0.9), dqn_target(b, p, 0.9))

    def test_ddqn_evaluates_with_target_network(self):
        b = one_hot_batch(0, 0, 1.0, 1)
        online = q_table_net([[0, 0], [5, 4]])
        target = q_table_net([[0, 0], [1, 7]])
        assert ddqn_target(b, online, target, 0.9).tolist() == [1.0 + 0.9 * 1.0]

    def test_gamma_one_neutral(self):
        b = one_hot_batch(0, 0, 1.0, 1, dt=17.3)
        online = q_table_net([[0, 0], [2, 3]])
        target = q_table_net([[0, 0], [6, 0.5]])
        assert ddqn_target(b, online, target, 1.0).tolist() == [1.5]


class TestPenaltyAndLoss:
    def test_penalty_symmetric(self):
        assert cql_penalty([0.0, 0.0], Action.SEND) == pytest.approx(0.693147, abs=1e-6)
        assert cql_penalty([0.0, 0.0], Action.NOT_SEND) == pytest.approx(0.693147, abs=1e-6)

    def test_penalty_direct(self):
        assert cql_penalty([1.0, 0.0], 0) == pytest.approx(math.log(math.e + 1) - 1, abs=1e-12)
        assert math.log(math.e + 1) == pytest.approx(1.313262, abs=1e-6)
        assert cql_penalty([1.0, 0.0], 0) == pytest.approx(0.313262, abs=1e-6)

    def test_penalty_small_when_data_action_dominates(self):
        assert cql_penalty([10.0, 0.0], 0) == pytest.approx(0.0000454, abs=1e-7)

    def test_alpha_zero_is_half_mse(self):
        rng = np.random.default_rng(1)
        p = init_mlp([3, 4, 2], rng)
        b = Batch(rng.normal(size=(5, 3)), rng.integers(0, 2, 5), np.zeros(5), rng.normal(size=(5, 3)),
                  np.ones(5), np.zeros(5, bool))
        y = rng.normal(size=5)
        res = cql_loss_with_targets(b, p, y, alpha=0.0)
        q = mlp_forward(p, b.states)[np.arange(5), b.actions]
        assert res.loss == pytest.approx(0.5 * np.mean((q - y) ** 2), rel=1e-14)

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 2.0])
    def test_zero_q_zero_target(self, alpha):
        p = MlpParams([1, 2], [np.zeros((1, 2))], [np.zeros(2)])
        b = Batch(np.ones((1, 1)), np.array([1]), np.zeros(1), np.ones((1, 1)), np.ones(1), np.ones(1, bool))
        res = cql_loss_with_targets(b, p, np.zeros(1), alpha)
        assert res.loss == pytest.approx(alpha * math.log(2), abs=1e-15)

    def test_full_loss_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        p = init_mlp([4, 6, 5, 2], rng, "tanh")
        b = Batch(rng.normal(size=(7, 4)), rng.integers(0, 2, 7), rng.normal(size=7), rng.normal(size=(7, 4)),
                  rng.uniform(0.5, 3, 7), np.zeros(7, bool))
        cfg = TrainConfig(alpha=0.5, gamma=0.9)
        target = init_mlp([4, 6, 5, 2], rng, "tanh")
        y = ddqn_target(b, p, target, cfg.gamma)  # held fixed: semi-gradient
        analytic = cql_loss(b, p, target, cfg).grads.flatten()
        numeric = central_difference(
            lambda f: cql_loss_with_targets(b, p.with_flat(f), y, cfg.alpha).loss, p.flatten())
        assert relative_errors(analytic, numeric).max() <= 1e-4


def _rand_table(n, d, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64)
    s = rng.normal(size=(n, d))
    return TransitionTable(s, rng.integers(0, 2, n), t, t + rng.uniform(0.5, 2, n), t.copy(),
                           np.column_stack([rng.poisson(1, n), np.zeros(n), np.zeros(n)]).astype(float),
                           rng.normal(size=(n, d)), np.full(n, 0.5), rng.random(n) < 0.1,
                           np.arange(n)), rng.normal(size=n)


class TestTrain:
    def test_zero_epochs_returns_initial_network(self):
        tab, r = _rand_table(50, 3, 0)
        cfg = TrainConfig(epochs=0, hidden_dims=[4], seed=5, normalize_features=False)
        policy, report = train(tab, r, cfg)
        assert report.n_steps == 0 and len(report.total) == 0
        assert policy.params.equals(init_mlp([3, 4, 2], np.random.default_rng(5)))

    def test_step_count_and_sync_count(self):
        tab, r = _rand_table(100, 3, 1)
        cfg = TrainConfig(epochs=3, batch_size=16, target_sync_every=4, hidden_dims=[4])
        _, report = train(tab, r, cfg)
        assert report.n_steps == (100 // 16) * 3 == 18
        assert report.target_syncs == 18 // 4
        assert len(report.epochs) == 3 and np.all(np.isfinite(report.total))

    def test_bandit_fixed_point(self):
        n = 4000
        a = np.tile([0, 1], n // 2)
        t = np.arange(n, dtype=np.float64)
        r = a.astype(np.float64)
        tab = TransitionTable(np.ones((n, 1)), a, t, t + 1, t.copy(), np.zeros((n, 3)), np.ones((n, 1)),
                              np.full(n, 0.5), np.zeros(n, bool), np.arange(n))
        cfg = TrainConfig(gamma=1e-12, alpha=0.0, batch_size=32, epochs=3, learning_rate=0.05,
                          hidden_dims=[8], normalize_features=False)
        policy, _ = train(tab, r, cfg)
        q = policy.q_values(np.ones(1))
        assert q[0] == pytest.approx(0.0, abs=0.05) and q[1] == pytest.approx(1.0, abs=0.05)
        assert greedy_action(policy, np.ones(1)) == Action.SEND

    def test_chain_policy_matches_value_iteration(self):
        tab, r = chain_table(50_000, 0)
        cfg = TrainConfig(gamma=0.9, alpha=0.5, batch_size=64, epochs=4, target_sync_every=50,
                          learning_rate=0.02, normalize_features=False, seed=0)
        policy, _ = train(tab, r, cfg)
        greedy = greedy_action(policy, np.eye(CHAIN_STATES))
        assert greedy.tolist() == value_iteration(0.9).argmax(axis=1).tolist()

    def test_deterministic(self):
        tab, r = _rand_table(200, 3, 2)
        cfg = TrainConfig(epochs=2, batch_size=32, hidden_dims=[8, 4], seed=3)
        p1, r1 = train(tab, r, cfg)
        p2, r2 = train(tab, r, cfg)
        assert p1.params.equals(p2.params)
        assert np.array_equal(r1.total, r2.total) and r1.epochs == r2.epochs

    def test_target_sync_bookkeeping(self):
        tab, r = _rand_table(200, 3, 3)
        cfg = TrainConfig(epochs=2, batch_size=20, target_sync_every=3, hidden_dims=[6])
        seen = []
        train(tab, r, cfg, callback=lambda step, p, tgt: seen.append((step, p.copy(), tgt.copy())))
        for (step, p, tgt), (_, _, prev_tgt) in zip(seen[1:], seen[:-1]):
            if step % 3 == 0:
                assert tgt.equals(p)
            else:
                assert tgt.equals(prev_tgt)

    def test_alpha_zero_matches_reference_ddqn_loop(self):
        tab, r = _rand_table(120, 3, 4)
        cfg = TrainConfig(alpha=0.0, gamma=0.95, epochs=2, batch_size=16, target_sync_every=5,
                          learning_rate=0.01, hidden_dims=[5], normalize_features=False, seed=9)
        policy, _ = train(tab, r, cfg)

        rng = np.random.default_rng(cfg.seed)
        params = init_mlp([3, 5, 2], rng)
        target = params.copy()
        for step in range(1, (120 // 16) * 2 + 1):
            idx = rng.integers(0, 120, size=16)
            s, a, s2 = tab.states[idx], tab.actions[idx], tab.next_states[idx]
            disc = np.where(tab.terminal[idx], 0.0, cfg.gamma ** (tab.t_next[idx] - tab.t_k[idx]))
            pick = mlp_forward(params, s2).argmax(axis=1)
            y = r[idx] + disc * mlp_forward(target, s2)[np.arange(16), pick]
            q = mlp_forward(params, s)
            dq = np.zeros_like(q)
            dq[np.arange(16), a] = (q[np.arange(16), a] - y) / 16
            g = mlp_backward(params, s, dq)
            params = params.with_flat(params.flatten() - cfg.learning_rate * g.flatten())
            if step % cfg.target_sync_every == 0:
                target = params.copy()
        assert np.allclose(policy.params.flatten(), params.flatten(), rtol=0, atol=1e-12)

    def test_divergence_reports_step(self):
        tab, r = _rand_table(100, 3, 5)
        cfg = TrainConfig(epochs=50, batch_size=10, learning_rate=1e12, hidden_dims=[4])
        with pytest.raises(DivergenceError) as err:
            train(tab, r * 1e6, cfg)
        assert err.value.step >= 1 and "step" in str(err.value)

    def test_reward_shape_checked(self):
        tab, r = _rand_table(30, 2, 6)
        with pytest.raises(DataError):
            train(tab, r[:-1], TrainConfig(epochs=1, batch_size=8))

    def test_batch_larger_than_data_rejected(self):
        tab, r = _rand_table(10, 2, 7)
        with pytest.raises(DataError, match="batch size"):
            train(tab, r, TrainConfig(epochs=1, batch_size=64))


class TestPolicy:
    def _policy(self, q):
        return QPolicy(q_table_net(np.atleast_2d(q)))

    def test_greedy_prefers_larger_q(self):
        assert greedy_action(self._policy([1.0, 2.0]), [1.0]) == Action.SEND
        assert greedy_action(self._policy([2.0, 1.0]), [1.0]) == Action.NOT_SEND

    def test_tie_goes_to_not_send(self):
        assert greedy_action(self._policy([1.5, 1.5]), [1.0]) == Action.NOT_SEND

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        p = init_mlp([3, 4, 2], rng)
        shifted = p.copy()
        shifted.biases[-1] = shifted.biases[-1] + 7.25
        s = rng.normal(size=(50, 3))
        assert np.array_equal(greedy_action(QPolicy(p), s), greedy_action(QPolicy(shifted), s))

    def test_epsilon_one_uniform(self):
        probs = policy_propensity(self._policy([3.0, 0.0]), [1.0], Smoothing("epsilon_greedy", 1.0))
        assert probs.tolist() == [0.5, 0.5]

    def test_epsilon_smoothed(self):
        probs = policy_propensity(self._policy([0.0, 3.0]), [1.0], Smoothing("epsilon_greedy", 0.1))
        assert probs.tolist() == pytest.approx([0.05, 0.95])

    def test_softmax_equal_q(self):
        probs = policy_propensity(self._policy([0.3, 0.3]), [1.0], Smoothing("softmax", temperature=2.0))
        assert probs.tolist() == [0.5, 0.5]

    def test_softmax_direct(self):
        probs = policy_propensity(self._policy([1.0, 0.0]), [1.0], Smoothing("softmax", temperature=1.0))
        assert probs == pytest.approx([0.7311, 0.2689], abs=1e-4)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        pol = QPolicy(init_mlp([3, 4, 2], rng))
        for sm in (Smoothing("epsilon_greedy", 0.2), Smoothing("softmax", temperature=0.5)):
            assert np.allclose(policy_propensity(pol, rng.normal(size=(20, 3)), sm).sum(axis=1), 1.0)

    @pytest.mark.parametrize("sm", [Smoothing("epsilon_greedy", 0.0), Smoothing("greedy")])
    def test_deterministic_target_rejected_for_ope(self, sm):
        with pytest.raises(SupportError):
            sm.validate(for_ope=True)
