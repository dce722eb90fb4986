"""MDP vocabulary for the send / not-send notification problem.

Time is measured in hours and the discount factor is per hour: a reward
collected over ``(t_k, t_next]`` is discounted by ``gamma ** (t_next - t_0)``
where ``t_0`` is the first decision time of the episode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

N_ACTIONS = 2


class Action(IntEnum):
    NOT_SEND = 0
    SEND = 1


@dataclass(frozen=True)
class RewardVector:
    m_s: float = 0.0  # site visits in (t_k, t_next]
    m_c: float = 0.0  # 1 if the sent notification was clicked
    m_v: float = 0.0  # -1 on SEND, else 0

    @classmethod
    def for_action(cls, action: Action, visits: float, clicked: bool) -> "RewardVector":
        if action == Action.SEND:
            return cls(float(visits), 1.0 if clicked else 0.0, -1.0)
        return cls(float(visits), 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.m_s, self.m_c, self.m_v], dtype=np.float64)


@dataclass(frozen=True)
class PreferenceVector:
    w_s: float = 1.0
    w_c: float = 1.0
    w_v: float = 1.0

    def __post_init__(self):
        if not all(np.isfinite([self.w_s, self.w_c, self.w_v])):
            raise ConfigError("preference weights must be finite")
        if self.w_s == 0 and self.w_c == 0 and self.w_v == 0:
            raise ConfigError("at least one preference weight must be nonzero")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_s, self.w_c, self.w_v], dtype=np.float64)

    def scaled(self, c: float) -> "PreferenceVector":
        return PreferenceVector(self.w_s * c, self.w_c * c, self.w_v * c)


def scalarize(prefs: PreferenceVector, m) -> float:
    """Linear scalarization ``w_s*m_s + w_c*m_c + w_v*m_v``."""
    if isinstance(m, RewardVector):
        return prefs.w_s * m.m_s + prefs.w_c * m.m_c + prefs.w_v * m.m_v
    m = np.asarray(m, dtype=np.float64)
    return m @ prefs.as_array()


@dataclass(frozen=True, eq=False)
class Transition:
    state: np.ndarray
    action: Action
    t_k: float
    t_next: float
    reward: RewardVector
    next_state: np.ndarray
    behavior_propensity: float
    episode_id: str
    terminal: bool = False

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (
            np.array_equal(self.state, other.state)
            and self.action == other.action
            and self.t_k == other.t_k
            and self.t_next == other.t_next
            and self.reward == other.reward
            and np.array_equal(self.next_state, other.next_state)
            and self.behavior_propensity == other.behavior_propensity
            and self.episode_id == other.episode_id
            and self.terminal == other.terminal
        )


@dataclass(eq=True)
class Trajectory:
    episode_id: str
    user_id: str
    steps: List[Transition] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def t0(self) -> float:
        return self.steps[0].t_k if self.steps else 0.0


def discount_weights(t0, t_next, gamma: float) -> np.ndarray:
    """``gamma ** (t_next - t0)`` elementwise, with ``gamma`` in (0, 1]."""
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    return np.power(gamma, np.asarray(t_next, dtype=np.float64) - np.asarray(t0, dtype=np.float64))


def discounted_return(traj: Trajectory, gamma: float, scalar_rewards: Sequence[float]) -> float:
    """Sum over steps of ``gamma ** (t_next_k - t_0) * r_k``."""
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    rewards = np.asarray(scalar_rewards, dtype=np.float64)
    if rewards.shape != (len(traj),):
        raise DataError(f"expected {len(traj)} rewards, got {rewards.shape}")
    if not traj.steps:
        return 0.0
    t_next = np.array([s.t_next for s in traj.steps])
    return float(np.sum(discount_weights(traj.t0, t_next, gamma) * rewards))


def validate_trajectory(traj: Trajectory) -> List[str]:
    """Every violated trajectory/transition invariant; empty list means ok."""
    problems: List[str] = []
    width: Optional[int] = None
    for k, step in enumerate(traj.steps):
        if step.episode_id != traj.episode_id:
            problems.append(f"episode id mismatch at step {k}")
        if not step.t_next > step.t_k:
            problems.append(f"non-increasing timestamps at step {k}")
        if k > 0 and not step.t_k > traj.steps[k - 1].t_k:
            problems.append(f"non-increasing timestamps at step {k}")
        if not 0.0 < step.behavior_propensity <= 1.0:
            problems.append(f"behavior propensity {step.behavior_propensity} outside (0, 1] at step {k}")
        state = np.asarray(step.state)
        nxt = np.asarray(step.next_state)
        if width is None:
            width = state.shape[0]
        if state.shape != (width,) or nxt.shape != (width,):
            problems.append(f"feature vector length mismatch at step {k}")
        elif not (np.all(np.isfinite(state)) and np.all(np.isfinite(nxt))):
            problems.append(f"non-finite feature value at step {k}")
        r = step.reward
        if r.m_s < 0:
            problems.append(f"negative visit count at step {k}")
        if r.m_c not in (0.0, 1.0) or (step.action == Action.NOT_SEND and r.m_c != 0.0):
            problems.append(f"click reward inconsistent with action at step {k}")
        want_v = -1.0 if step.action == Action.SEND else 0.0
        if r.m_v != want_v:
            problems.append(f"volume reward inconsistent with action at step {k}")
        if k + 1 < len(traj.steps):
            nxt_step = traj.steps[k + 1]
            if not np.array_equal(step.next_state, nxt_step.state):
                problems.append(f"next_state of step {k} does not match state of step {k + 1}")
            if step.t_next != nxt_step.t_k:
                problems.append(f"t_next of step {k} does not match t_k of step {k + 1}")
            if step.terminal:
                problems.append(f"terminal flag set before the last step at step {k}")
    return problems


@dataclass
class TransitionTable:
    """Column-oriented view of logged steps, episodes stored contiguously.

    ``t_start`` repeats each episode's first decision time on every row, so
    per-row discount factors are ``gamma ** (t_next - t_start)``.
    """

    states: np.ndarray
    actions: np.ndarray
    t_k: np.ndarray
    t_next: np.ndarray
    t_start: np.ndarray
    rewards: np.ndarray  # (n, 3): m_s, m_c, m_v
    next_states: np.ndarray
    propensity: np.ndarray
    terminal: np.ndarray
    episode: np.ndarray  # integer episode index per row, non-decreasing
    # episodes without any decision still count in per-episode averages
    n_episodes_total: Optional[int] = None

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def n_episodes(self) -> int:
        if self.n_episodes_total is not None:
            return self.n_episodes_total
        if len(self) == 0:
            return 0
        return int(self.episode.max()) + 1

    @property
    def delta_t(self) -> np.ndarray:
        return self.t_next - self.t_k

    def episode_starts(self) -> np.ndarray:
        """Row index where each episode begins."""
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64)
        change = np.flatnonzero(np.diff(self.episode)) + 1
        return np.concatenate([[0], change]).astype(np.int64)

    def take(self, idx) -> "TransitionTable":
        return TransitionTable(
            self.states[idx], self.actions[idx], self.t_k[idx], self.t_next[idx],
            self.t_start[idx], self.rewards[idx], self.next_states[idx],
            self.propensity[idx], self.terminal[idx], self.episode[idx],
        )

    def with_rewards(self, rewards: np.ndarray) -> "TransitionTable":
        return TransitionTable(
            self.states, self.actions, self.t_k, self.t_next, self.t_start,
            np.asarray(rewards, dtype=np.float64), self.next_states, self.propensity,
            self.terminal, self.episode, self.n_episodes_total,
        )

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], n_features: int) -> "TransitionTable":
        rows = [(i, traj.t0, s) for i, traj in enumerate(trajectories) for s in traj.steps]
        n = len(rows)
        if n == 0:
            z = np.zeros(0)
            return cls(np.zeros((0, n_features)), np.zeros(0, dtype=np.int64), z, z.copy(), z.copy(),
                       np.zeros((0, 3)), np.zeros((0, n_features)), z.copy(),
                       np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64), len(trajectories))
        return cls(
            states=np.array([s.state for _, _, s in rows], dtype=np.float64).reshape(n, n_features),
            actions=np.array([int(s.action) for _, _, s in rows], dtype=np.int64),
            t_k=np.array([s.t_k for _, _, s in rows], dtype=np.float64),
            t_next=np.array([s.t_next for _, _, s in rows], dtype=np.float64),
            t_start=np.array([t0 for _, t0, _ in rows], dtype=np.float64),
            rewards=np.array([[s.reward.m_s, s.reward.m_c, s.reward.m_v] for _, _, s in rows], dtype=np.float64),
            next_states=np.array([s.next_state for _, _, s in rows], dtype=np.float64).reshape(n, n_features),
            propensity=np.array([s.behavior_propensity for _, _, s in rows], dtype=np.float64),
            terminal=np.array([s.terminal for _, _, s in rows], dtype=bool),
            episode=np.array([i for i, _, _ in rows], dtype=np.int64),
            n_episodes_total=len(trajectories),
        )
