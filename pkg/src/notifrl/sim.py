"""Stochastic notification user simulator and logged-data generator.

Each user has a latent fatigue level that jumps on every send and decays
exponentially. Sends lift the visit rate for a few hours and can be
clicked; once fatigue passes the user's disable threshold, both the click
probability and the organic visit rate fall off sharply. That is the
short-term/long-term tension a learned send policy has to balance.

Candidates arrive by a Poisson process, so decisions happen at irregular
times. Visits are an inhomogeneous Poisson process sampled by thinning.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import BaselineConfig, DynamicsConfig, SimConfig, digest
from .dataset import FEATURE_SCHEMA, Dataset
from .errors import ConfigError, NumericalError
from .mdp import (
    N_ACTIONS,
    Action,
    PreferenceVector,
    RewardVector,
    Trajectory,
    Transition,
    discounted_return,
    scalarize,
)
from .metrics import EventLog, compute_metrics

Policy = Callable[[np.ndarray], np.ndarray]  # state -> (p_not_send, p_send)

HOURS_CAP = 168.0
_F = {name: i for i, name in enumerate(FEATURE_SCHEMA)}


@dataclass(frozen=True)
class UserModel:
    base_visit_rate: float  # visits/day
    click_affinity: float
    fatigue: float
    notification_boost: float
    disable_threshold: float


def _lognormal(mean: float, sigma: float, z: float) -> float:
    if mean <= 0:
        return 0.0
    return mean * math.exp(sigma * z - 0.5 * sigma * sigma)


def sample_user(config: SimConfig, rng: np.random.Generator) -> UserModel:
    p = config.population
    z = rng.standard_normal(5)
    return UserModel(
        base_visit_rate=_lognormal(p.base_visit_rate_mean, p.base_visit_rate_sigma, z[0]),
        click_affinity=p.click_affinity_mean + p.click_affinity_sd * z[1],
        fatigue=max(0.0, p.fatigue_mean + p.fatigue_sd * z[2]),
        notification_boost=_lognormal(p.notification_boost_mean, p.notification_boost_sigma, z[3]),
        disable_threshold=p.disable_threshold_mean + p.disable_threshold_sd * z[4],
    )


def epsilon_greedy_propensity(base_action: Action, queried: Action, epsilon: float) -> float:
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1], got {epsilon}")
    share = epsilon / N_ACTIONS
    return 1.0 - epsilon + share if queried == base_action else share


def moo_baseline_decide(p_session_lift: float, p_click: float, beta: float, lam: float) -> Action:
    """SEND iff ``p_session_lift + beta * p_click > lam`` (strict)."""
    return Action.SEND if p_session_lift + beta * p_click > lam else Action.NOT_SEND


class MooBaselinePolicy:
    """Threshold rule over hand-set click and session-lift predictors."""

    def __init__(self, cfg: BaselineConfig):
        self.cfg = cfg

    def predict(self, state: np.ndarray) -> Tuple[float, float]:
        c = self.cfg
        logit = (
            state[_F["profile_click_affinity"]]
            + c.click_quality_coef * state[_F["candidate_quality_score"]]
            - c.click_recent_sends_coef * state[_F["sends_past_day"]]
        )
        p_click = 1.0 / (1.0 + math.exp(-logit))
        lift = c.session_lift_per_visit_rate * state[_F["profile_base_visit_rate"]]
        return lift, p_click

    def __call__(self, state: np.ndarray) -> Action:
        lift, p_click = self.predict(state)
        return moo_baseline_decide(lift, p_click, self.cfg.beta, self.cfg.threshold)

    def describe(self) -> str:
        c = self.cfg
        return f"moo_baseline(beta={c.beta}, threshold={c.threshold})"


class EpsilonGreedy:
    """Behavior policy: follow ``base`` w.p. 1 - eps, else uniform."""

    def __init__(self, base: Callable[[np.ndarray], Action], epsilon: float):
        if not 0.0 <= epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {epsilon}")
        self.base = base
        self.epsilon = epsilon

    def __call__(self, state: np.ndarray) -> np.ndarray:
        probs = np.full(N_ACTIONS, self.epsilon / N_ACTIONS)
        probs[int(self.base(state))] += 1.0 - self.epsilon
        return probs

    def describe(self) -> str:
        inner = getattr(self.base, "describe", lambda: repr(self.base))()
        return f"epsilon_greedy(epsilon={self.epsilon}, base={inner})"


def constant_policy(action: Action) -> Policy:
    probs = np.zeros(N_ACTIONS)
    probs[int(action)] = 1.0
    return lambda state: probs


def click_probability(user: UserModel, quality: float, fatigue: float, dyn: DynamicsConfig) -> float:
    """Logistic in affinity + quality, reduced by fatigue and sharply past the disable threshold."""
    logit = user.click_affinity + dyn.click_quality_coef * quality
    if dyn.fatigue_effects:
        logit -= dyn.click_fatigue_coef * fatigue
        logit -= dyn.disable_penalty * max(0.0, fatigue - user.disable_threshold)
    return 1.0 / (1.0 + math.exp(-logit)) if logit > -700 else 0.0


def _arrival_times(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    horizon = config.horizon_hours
    if config.arrival_process == "regular":
        spacing = 24.0 / config.candidate_arrival_rate
        n = int(math.floor(horizon / spacing + 0.5))
        times = spacing * (0.5 + np.arange(n))
        return times[times < horizon]
    n = rng.poisson(config.candidate_arrival_rate * config.horizon_days)
    times = np.sort(rng.uniform(0.0, horizon, size=n))
    if n > 1:
        times = times[np.concatenate([[True], np.diff(times) > 0])]
    return times


def simulate_episode(
    user: UserModel,
    policy: Policy,
    config: SimConfig,
    rng: np.random.Generator,
    user_id: str = "0",
) -> Tuple[Trajectory, EventLog]:
    """Run one user through the horizon under ``policy``.

    The logged propensity of each step is the probability the policy gave
    to the action it actually took.
    """
    dyn = config.dynamics
    horizon = config.horizon_hours
    times = _arrival_times(config, rng)
    n = times.size
    quality = dyn.quality_mean + dyn.quality_sd * rng.standard_normal(n)

    if user.base_visit_rate > 0:
        gap = min(rng.exponential(24.0 / user.base_visit_rate), HOURS_CAP)
    else:
        gap = HOURS_CAP
    last_visit = -gap
    last_send: Optional[float] = None
    send_times: List[float] = []
    fat_ref, fat_t = user.fatigue, 0.0
    pending_click_visits: List[float] = []
    log = EventLog(user_id=user_id, horizon=horizon)
    base_hourly = user.base_visit_rate / 24.0
    effects = dyn.fatigue_effects

    def fatigue_at(t: float) -> float:
        if not effects:
            return 0.0
        return fat_ref * math.exp(-(t - fat_t) / dyn.fatigue_decay_hours)

    def boost_at(t: float) -> float:
        if last_send is None:
            return 1.0
        return 1.0 + user.notification_boost * math.exp(-(t - last_send) / dyn.boost_decay_hours)

    def visits_in(a: float, b: float) -> List[float]:
        out: List[float] = []
        if dyn.session_noise > 0:
            s2 = dyn.session_noise ** 2
            g = rng.gamma(1.0 / s2, s2)
        else:
            g = 1.0
        lam_max = base_hourly * g * boost_at(a)
        if lam_max > 0 and b > a:
            count = rng.poisson(lam_max * (b - a))
            if count:
                ts = a + (b - a) * rng.random(count)
                u = rng.random(count)
                for t, ui in zip(ts, u):
                    lam = base_hourly * g * boost_at(t)
                    if effects:
                        over = max(0.0, fatigue_at(t) - user.disable_threshold)
                        lam *= math.exp(-dyn.visit_fatigue_coef * over)
                    if ui * lam_max < lam:
                        out.append(float(t))
        while pending_click_visits and pending_click_visits[0] <= b:
            out.append(pending_click_visits.pop(0))
        out.sort()
        return out

    def features(t: float, q: float) -> np.ndarray:
        badge = len(send_times) - bisect.bisect_right(send_times, last_visit)
        past_day = len(send_times) - bisect.bisect_left(send_times, t - 24.0)
        past_week = len(send_times) - bisect.bisect_left(send_times, t - 168.0)
        since_send = HOURS_CAP if last_send is None else min(t - last_send, HOURS_CAP)
        return np.array(
            [badge, t - last_visit, past_day, past_week, since_send, q,
             user.base_visit_rate, user.click_affinity],
            dtype=np.float64,
        )

    first = float(times[0]) if n else horizon
    pre = visits_in(0.0, first)
    log.visits.extend(pre)
    if pre:
        last_visit = pre[-1]

    traj = Trajectory(episode_id=user_id, user_id=user_id)
    if n == 0:
        return traj, log

    state = features(first, float(quality[0]))
    for k in range(n):
        t = float(times[k])
        if not np.all(np.isfinite(state)):
            raise NumericalError(f"non-finite state for user {user_id} at step {k}")
        probs = np.asarray(policy(state), dtype=np.float64)
        if (probs.shape != (N_ACTIONS,) or not np.all(np.isfinite(probs)) or np.any(probs < 0)
                or abs(probs.sum() - 1.0) > 1e-9):
            raise NumericalError(f"policy returned an invalid distribution {probs} for user {user_id} at step {k}")
        action = Action.SEND if rng.random() < probs[Action.SEND] else Action.NOT_SEND
        clicked = False
        if action == Action.SEND:
            fat = fatigue_at(t)
            p_click = click_probability(user, float(quality[k]), fat, dyn)
            if not math.isfinite(p_click):
                raise NumericalError(f"non-finite click probability for user {user_id} at step {k}")
            clicked = bool(rng.random() < p_click)
            log.sends.append((t, k))
            if clicked:
                delay = rng.exponential(dyn.click_visit_delay_hours) if dyn.click_visit_delay_hours > 0 else 0.0
                tc = min(t + delay, horizon)
                log.clicks.append((tc, k))
                bisect.insort(pending_click_visits, tc)
            fat_ref, fat_t = fat + dyn.fatigue_per_send, t
            last_send = t
            send_times.append(t)

        last = k + 1 == n
        end = horizon if last else float(times[k + 1])
        vis = visits_in(t, end)
        log.visits.extend(vis)
        if vis:
            last_visit = vis[-1]
        next_state = features(end, 0.0 if last else float(quality[k + 1]))
        traj.steps.append(Transition(
            state=state,
            action=action,
            t_k=t,
            t_next=end,
            reward=RewardVector.for_action(action, len(vis), clicked),
            next_state=next_state,
            behavior_propensity=float(probs[action]),
            episode_id=user_id,
            terminal=last,
        ))
        state = next_state
    return traj, log


def simulate_users(
    config: SimConfig,
    policy: Policy,
    n_users: int,
    seed: int,
) -> List[Tuple[UserModel, Trajectory, EventLog]]:
    """Simulate ``n_users`` independent users, each on its own seed-derived stream."""
    out = []
    width = max(6, len(str(max(n_users - 1, 0))))
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(n_users)):
        rng = np.random.default_rng(ss)
        user = sample_user(config, rng)
        traj, log = simulate_episode(user, policy, config, rng, user_id=f"{i:0{width}d}")
        out.append((user, traj, log))
    return out


def generate_dataset(
    config: SimConfig,
    base_policy: Optional[Callable[[np.ndarray], Action]] = None,
    seed: Optional[int] = None,
    with_logs: bool = False,
):
    """Log one trajectory per user under epsilon-greedy around ``base_policy``.

    ``epsilon`` must be positive so every action keeps nonzero propensity.
    """
    if config.epsilon <= 0:
        raise ConfigError("sim.epsilon must be > 0: importance sampling needs full support")
    if base_policy is None:
        base_policy = MooBaselinePolicy(config.baseline)
    seed = config.rng_seed if seed is None else seed
    behavior = EpsilonGreedy(base_policy, config.epsilon)
    runs = simulate_users(config, behavior, config.n_users, seed)
    provenance = {
        "sim_config_digest": digest(config),
        "behavior_policy": behavior.describe(),
        "epsilon": config.epsilon,
        "seed": seed,
        "n_users": config.n_users,
    }
    ds = Dataset([traj for _, traj, _ in runs], FEATURE_SCHEMA, provenance)
    if with_logs:
        return ds, [log for _, _, log in runs]
    return ds


@dataclass
class GroundTruth:
    mean_return: float
    stderr: float
    n_episodes: int
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)
    metric_stderr: Dict[str, float] = field(default_factory=dict)

    def ci(self, z: float = 1.96) -> Tuple[float, float]:
        return self.mean_return - z * self.stderr, self.mean_return + z * self.stderr


def _mean_se(x: Sequence[float]) -> Tuple[float, float]:
    a = np.asarray(x, dtype=np.float64)
    if a.size <= 1:
        return float(a.mean()) if a.size else 0.0, 0.0
    if np.all(a == a[0]):
        # np.std of identical values can round to a tiny nonzero number
        return float(a[0]), 0.0
    return float(a.mean()), float(a.std(ddof=1) / np.sqrt(a.size))


def true_policy_value(
    policy: Policy,
    config: SimConfig,
    n_episodes: int,
    gamma: float,
    prefs: PreferenceVector,
    seed: int = 0,
) -> GroundTruth:
    """Monte-Carlo value of ``policy`` on fresh simulated users.

    Per-episode metrics are averaged; ``ctr`` follows the per-user daily
    definition over all simulated users.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    runs = simulate_users(config, policy, n_episodes, seed)
    period = (0.0, config.horizon_hours)
    returns, per = [], {k: [] for k in ("sessions", "wau", "volume", "clicks", "visits")}
    for _, traj, log in runs:
        rewards = [scalarize(prefs, s.reward) for s in traj.steps]
        returns.append(discounted_return(traj, gamma, rewards))
        m = compute_metrics([log], period)
        for k in per:
            per[k].append(getattr(m, k))
    mean, se = _mean_se(returns)
    metrics: Dict[str, Optional[float]] = {}
    metric_se: Dict[str, float] = {}
    for k, vals in per.items():
        metrics[k], metric_se[k] = _mean_se(vals)
    metrics["ctr"] = compute_metrics([log for _, _, log in runs], period).ctr
    return GroundTruth(mean, se, n_episodes, metrics, metric_se)
