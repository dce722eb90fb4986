"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that pytest prints in an
"acceptance criteria" section at the end of the run.
"""
import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from notifrl.cli import OPE_COLUMNS, evaluation_records
from notifrl.config import DynamicsConfig, PipelineConfig, PrefsConfig, RewardConfig, SimConfig, SweepConfig, TrainConfig
from notifrl.dataset import FEATURE_SCHEMA
from notifrl.io import dumps_checkpoint, dumps_dataset, dumps_records, loads_checkpoint, loads_dataset
from notifrl.mdp import PreferenceVector
from notifrl.metrics import EventLog, compute_metrics, session_count
from notifrl.nn import init_mlp
from notifrl.ope import ESTIMATORS, empirical_mean_return, one_step_is, per_decision_is, trajectory_is
from notifrl.pipeline import evaluate, fit_reward_models, ground_truth, run_sweep, train_policy
from notifrl.sim import generate_dataset
from notifrl.trainer import Batch, Smoothing, cql_loss, cql_loss_with_targets, ddqn_target, train

from oracles import (
    CHAIN_STATES,
    TOY_TARGET,
    central_difference,
    chain_table,
    relative_errors,
    toy_table,
    toy_value_dp,
    toy_value_enumerated,
    value_iteration,
)

SEEDS = range(5)
SMOOTHING = Smoothing("epsilon_greedy", 0.05)


def chain_config(alpha, seed):
    return TrainConfig(gamma=0.9, alpha=alpha, batch_size=64, epochs=4, target_sync_every=50,
                       learning_rate=0.02, normalize_features=False, seed=seed)


@pytest.fixture(scope="module")
def chain_runs():
    """Chain-MDP policies keyed by (alpha, seed), trained once per module."""
    cache = {}

    def get(alpha, seed):
        if (alpha, seed) not in cache:
            tab, r = chain_table(50_000, seed)
            cache[alpha, seed] = (tab, train(tab, r, chain_config(alpha, seed))[0])
        return cache[alpha, seed]

    return get


def test_1_gradient_correctness(record):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_checks = 0
    for net in range(20):
        d = int(rng.integers(1, 5))
        dims = [d, *rng.integers(2, 6, size=int(rng.integers(1, 3))).tolist(), 2]
        act = ("relu", "tanh")[net % 2]
        params = init_mlp(dims, rng, act)
        target = init_mlp(dims, rng, act)
        n = int(rng.integers(1, 9))
        batch = Batch(rng.normal(size=(n, d)), rng.integers(0, 2, n), rng.normal(size=n),
                      rng.normal(size=(n, d)), rng.uniform(0.2, 3.0, n), rng.random(n) < 0.2)
        for alpha in (0.0, 0.5, 2.0):
            cfg = TrainConfig(alpha=alpha, gamma=0.9)
            y = ddqn_target(batch, params, target, cfg.gamma)
            analytic = cql_loss(batch, params, target, cfg).grads.flatten()
            numeric = central_difference(
                lambda f: cql_loss_with_targets(batch, params.with_flat(f), y, alpha).loss, params.flatten())
            worst = max(worst, float(relative_errors(analytic, numeric, floor=1e-6).max()))
            n_checks += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed <= 60
    record("1. gradient correctness", ok,
           f"{n_checks} loss instances on 20 networks, max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s")
    assert ok


def test_2_tabular_oracle(record, chain_runs):
    start = time.perf_counter()
    optimal = value_iteration(0.9).argmax(axis=1).tolist()
    hits = []
    for seed in SEEDS:
        _, policy = chain_runs(0.5, seed)
        greedy = policy.q_values(np.eye(CHAIN_STATES)).argmax(axis=1).tolist()
        hits.append(greedy == optimal)
    elapsed = time.perf_counter() - start
    ok = sum(hits) >= 4 and elapsed <= 120
    record("2. tabular oracle", ok, f"pi* = {optimal}, recovered in {sum(hits)}/5 seeds, {elapsed:.1f}s")
    assert ok


def test_3_conservatism(record, chain_runs):
    lower = []
    for seed in SEEDS:
        tab, p0 = chain_runs(0.0, seed)
        _, p1 = chain_runs(1.0, seed)
        m0 = p0.q_values(tab.states).max(axis=1).mean()
        m1 = p1.q_values(tab.states).max(axis=1).mean()
        lower.append(m1 < m0)

    rng = np.random.default_rng(7)
    signs_ok = 0
    for _ in range(100):
        d = int(rng.integers(1, 6))
        params = init_mlp([d, int(rng.integers(2, 8)), 2], rng, ("relu", "tanh")[int(rng.integers(2))])
        a = int(rng.integers(2))
        batch = Batch(rng.normal(size=(1, d)), np.array([a]), np.zeros(1), rng.normal(size=(1, d)),
                      np.ones(1), np.zeros(1, bool))
        y = rng.normal(size=1)
        # penalty part of dLoss/dQ: full loss minus the pure Bellman loss
        full = cql_loss_with_targets(batch, params, y, 1.0).q_grad
        dq = (full - cql_loss_with_targets(batch, params, y, 0.0).q_grad)[0]
        # gradient descent moves Q against dq: data action up, other action down
        signs_ok += bool(dq[a] < 0 and dq[1 - a] > 0)
    ok = sum(lower) >= 4 and signs_ok == 100
    record("3. CQL conservatism", ok,
           f"alpha=1 below alpha=0 in {sum(lower)}/5 seed pairs; penalty signs correct at {signs_ok}/100 points")
    assert ok


def test_4_ope_exactness_and_unbiasedness(record):
    start = time.perf_counter()
    ds = generate_dataset(SimConfig(n_users=200), seed=11)
    t = ds.table()
    r = t.rewards @ np.array([1.0, 1.0, 0.6])
    want = empirical_mean_return(t, r, 0.98)
    exact_err = max(abs(fn(t, r, t.propensity, 0.98).value - want) for fn in ESTIMATORS.values())
    toy, toy_r, _ = toy_table(1000, 3, np.random.default_rng(0))
    want_toy = empirical_mean_return(toy, toy_r, 0.9)
    exact_err = max(exact_err, *(abs(fn(toy, toy_r, toy.propensity, 0.9).value - want_toy)
                                 for fn in ESTIMATORS.values()))
    part_a = exact_err <= 1e-12 * max(1.0, abs(want))

    truth = toy_value_enumerated(TOY_TARGET, 2, 0.9)
    assert truth == pytest.approx(toy_value_dp(TOY_TARGET, 2, 0.9), abs=1e-14)
    rng = np.random.default_rng(1)
    estimates = {"trajectory_is": [], "per_decision_is": []}
    for _ in range(200):
        tab, rew, target = toy_table(5000, 2, rng)
        estimates["trajectory_is"].append(trajectory_is(tab, rew, target, 0.9).value)
        estimates["per_decision_is"].append(per_decision_is(tab, rew, target, 0.9).value)
    parts = []
    part_b = True
    for name, vals in estimates.items():
        vals = np.asarray(vals)
        half = 2.576 * vals.std(ddof=1) / math.sqrt(vals.size)
        inside = abs(vals.mean() - truth) <= half
        part_b &= inside
        parts.append(f"{name} {vals.mean():.5f} +- {half:.5f}")
    elapsed = time.perf_counter() - start
    ok = part_a and part_b and elapsed <= 180
    record("4. OPE exactness and unbiasedness", ok,
           f"(a) max |estimate - empirical| {exact_err:.1e}; (b) J = {truth:.5f}, {', '.join(parts)}; "
           f"{elapsed:.1f}s")
    assert ok


def test_5_one_step_variance(record):
    rng = np.random.default_rng(5)
    one, traj = [], []
    for _ in range(200):
        tab, r, target = toy_table(300, 10, rng)
        one.append(one_step_is(tab, r, target, 0.9).value)
        traj.append(trajectory_is(tab, r, target, 0.9).value)
    truth = toy_value_dp(TOY_TARGET, 10, 0.9)
    v1, vt = np.var(one, ddof=1), np.var(traj, ddof=1)
    bias = abs(np.mean(one) - truth)
    ok = v1 <= vt
    record("5. one-step IS variance", ok,
           f"var one-step {v1:.4g} vs trajectory IS {vt:.4g}; one-step |bias| {bias:.4f} against J = {truth:.4f}")
    assert ok


def test_6_offline_vs_ground_truth(record):
    start = time.perf_counter()
    sim = SimConfig(n_users=500)
    ds = generate_dataset(sim, seed=1)
    rc = RewardConfig()
    models = fit_reward_models(ds, rc)
    ope_vol, gt_vol, ope_ret, gt_ret = [], [], [], []
    for w_s, w_v in ((0.2, 1.0), (1.0, 0.6), (3.0, 0.3), (1.0, 2.0)):
        prefs = PreferenceVector(w_s, 1.0, w_v)
        for alpha in (0.0, 1.0):
            cfg = TrainConfig(alpha=alpha, epochs=10, learning_rate=0.01, gamma=0.98)
            policy, _, _ = train_policy(ds, rc, cfg, models, prefs)
            ev = evaluate(ds, policy, SMOOTHING, prefs, 0.98)
            gt = ground_truth(policy, sim, SMOOTHING, 500, 0.98, prefs, seed=777)
            ope_vol.append(ev["volume"].value)
            gt_vol.append(gt.metrics["volume"])
            ope_ret.append(ev["scalarized"].value)
            gt_ret.append(gt.mean_return)
    r_vol = float(np.corrcoef(ope_vol, gt_vol)[0, 1])
    r_ret = float(np.corrcoef(ope_ret, gt_ret)[0, 1])
    elapsed = time.perf_counter() - start
    ok = r_vol >= 0.7 and r_ret >= 0.5 and elapsed <= 600
    record("6. offline vs ground truth", ok,
           f"8 policies, Pearson r volume {r_vol:.3f} (>= 0.7), scalarized {r_ret:.3f} (>= 0.5), {elapsed:.1f}s")
    assert ok


def test_7_preference_sweep_direction(record):
    start = time.perf_counter()
    sim = SimConfig(n_users=500)
    ds = generate_dataset(sim, seed=1)
    weights = (0.25, 0.5, 1.0, 2.0)
    cfg = PipelineConfig(
        sim=sim,
        train=TrainConfig(epochs=10, learning_rate=0.01),
        sweep=SweepConfig(preferences=[PrefsConfig(w_s=w, w_c=1.0, w_v=0.6) for w in weights],
                          alphas=[0.3], learning_rates=[0.01], replications=10),
    )
    rows = run_sweep(ds, cfg, fit_reward_models(ds, cfg.reward))
    assert len(rows) == 40 and all(r["status"] == "ok" for r in rows)
    medians = [float(np.median([r["volume"] for r in rows if r["cell"] == c])) for c in range(4)]
    rho = float(spearmanr(weights, medians)[0])
    monotone = all(b >= a for a, b in zip(medians, medians[1:]))
    elapsed = time.perf_counter() - start
    ok = rho > 0 and monotone and elapsed <= 900
    record("7. preference sweep direction", ok,
           f"median volume per w_s {[round(m, 2) for m in medians]}, Spearman rho {rho:.2f}, {elapsed:.1f}s")
    assert ok


def test_8_predicted_reward_substitution(record):
    start = time.perf_counter()
    sim = SimConfig(n_users=200, dynamics=DynamicsConfig(session_noise=3.0))
    prefs = PreferenceVector(1.0, 1.0, 0.6)
    wins = []
    for seed in SEEDS:
        ds = generate_dataset(sim, seed=100 + seed)
        res = {}
        for arm, predicted_sessions in (("observed", False), ("predicted", True)):
            rc = RewardConfig(use_predicted_clicks=True, use_predicted_sessions=predicted_sessions)
            cfg = TrainConfig(alpha=0.3, epochs=10, learning_rate=0.01, seed=seed)
            policy, _, _ = train_policy(ds, rc, cfg, fit_reward_models(ds, rc), prefs)
            gt = ground_truth(policy, sim, SMOOTHING, 3000, 0.98, prefs, seed=999 + seed)
            res[arm] = (gt.metrics["sessions"], gt.metrics["volume"])
        (s_obs, v_obs), (s_pred, v_pred) = res["observed"], res["predicted"]
        wins.append(s_pred >= s_obs and abs(v_pred - v_obs) <= 0.1 * v_obs)
    elapsed = time.perf_counter() - start
    ok = sum(wins) >= 3
    record("8. predicted-reward substitution", ok,
           f"predicted-session arm wins {sum(wins)}/5 paired seeds {wins}, {elapsed:.1f}s")
    assert ok


def test_9_metric_definitions(record):
    checks = [
        session_count([]) == 0,
        session_count([0, 10, 50]) == 2,
        session_count([0, 29, 58]) == 1,
        session_count([0, 30]) == 2,
    ]
    m = compute_metrics([EventLog("a", 168.0, visits=[3.0])])
    checks.append((m.sessions, m.wau, m.volume, m.ctr) == (1, 1, 0, None))
    log = EventLog("a", 168.0, sends=[(10.0, 0), (12.0, 1)], clicks=[(10.2, 0)])
    checks.append(compute_metrics([log]).ctr == 0.5)
    logs = [
        EventLog("a", 168.0, visits=[1.0, 1.25, 2.0], sends=[(10.0, 0), (12.0, 1), (30.0, 2)], clicks=[(10.1, 0)]),
        EventLog("b", 168.0, sends=[(50.0, 0)], clicks=[(50.2, 0)]),
        EventLog("c", 168.0, visits=[100.0]),
    ]
    m = compute_metrics(logs)
    checks.append((m.sessions, m.wau, m.volume, m.clicks, m.visits) == (3, 2, 4, 2, 4))
    checks.append(abs(m.ctr - 0.625) <= 1e-15)
    ok = all(checks)
    record("9. metric definitions", ok, f"{sum(checks)}/{len(checks)} fixtures exact")
    assert ok


def test_10_determinism_and_round_trips(record):
    cfg = PipelineConfig(sim=SimConfig(n_users=60), train=TrainConfig(epochs=2, batch_size=64, hidden_dims=[16]))
    texts, checkpoints, reports = [], [], []
    for _ in range(2):
        ds = generate_dataset(cfg.sim, seed=3)
        texts.append(dumps_dataset(ds))
        models = fit_reward_models(ds, cfg.reward)
        policy, _, spec = train_policy(ds, cfg.reward, cfg.train, models)
        checkpoints.append(dumps_checkpoint(policy, spec, cfg))
        ev = evaluate(ds, policy, SMOOTHING, cfg.reward.prefs.to_prefs(), cfg.ope.gamma)
        reports.append(dumps_records(OPE_COLUMNS, evaluation_records(ev)))
    back = loads_dataset(texts[0])
    restored = loads_checkpoint(checkpoints[0])
    states = back.table().states
    checks = {
        "dataset bytes": texts[0] == texts[1],
        "checkpoint bytes": checkpoints[0] == checkpoints[1],
        "report bytes": reports[0] == reports[1],
        "dataset round trip": back == ds and dumps_dataset(back) == texts[0],
        "checkpoint round trip": np.array_equal(restored.q_values(states), policy.q_values(states))
        and dumps_checkpoint(restored, spec, cfg) == checkpoints[0],
        "schema kept": tuple(restored.schema) == FEATURE_SCHEMA,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record("10. determinism and round trips", ok,
           "all byte-identical and lossless" if ok else f"failed: {failed}")
    assert ok
