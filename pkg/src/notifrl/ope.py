"""Importance-sampling off-policy evaluation.

All estimators average over episodes (including episodes with no decision,
whose return is zero) and discount a reward earned over ``(t_k, t_next]`` by
``gamma ** (t_next - t_0)``. They differ in the weight applied to each
reward term:

* trajectory IS: product of the ratios over the whole episode
* per-decision IS: product of the ratios up to and including step k
* one-step IS: the ratio at step k alone (biased, much lower variance)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .dataset import Dataset
from .errors import DataError, SupportError
from .mdp import Action, PreferenceVector, TransitionTable, discount_weights

TRAJECTORY_IS = "trajectory_is"
PER_DECISION_IS = "per_decision_is"
ONE_STEP_IS = "one_step_is"


@dataclass
class WeightDiagnostics:
    max_weight: float
    mean_weight: float
    weight_variance: float
    top1pct_mass: float

    @classmethod
    def from_weights(cls, w) -> "WeightDiagnostics":
        w = np.asarray(w, dtype=np.float64)
        if w.size == 0:
            return cls(0.0, 0.0, 0.0, 0.0)
        if np.any(w < 0):
            raise DataError("importance weights must be non-negative")
        total = w.sum()
        k = max(1, math.ceil(0.01 * w.size))
        top = np.sort(w)[::-1][:k].sum()
        return cls(float(w.max()), float(w.mean()), float(w.var()),
                   float(top / total) if total > 0 else 0.0)


@dataclass
class OpeEstimate:
    value: float
    stderr: float
    effective_sample_size: float
    estimator_kind: str
    n_units: int  # weighted units: episodes (trajectory IS) or transitions
    n_episodes: int = 0
    diagnostics: Optional[WeightDiagnostics] = None


def effective_sample_size(weights) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise DataError("importance weights must be non-negative")
    top = float(w.max()) if w.size else 0.0
    if top == 0.0:
        raise DataError("effective sample size undefined: all weights are zero")
    w = w / top  # rescale so tiny weights do not underflow when squared
    return float(np.sum(w)) ** 2 / float(np.sum(w * w))


def _table(data) -> TransitionTable:
    return data.table() if isinstance(data, Dataset) else data


def _ratios(table: TransitionTable, target_propensities) -> np.ndarray:
    beh = table.propensity
    bad = ~(beh > 0)
    if np.any(bad):
        raise SupportError(
            f"{int(bad.sum())} transition(s) have zero behavior propensity; importance weights undefined"
        )
    tp = np.asarray(target_propensities, dtype=np.float64)
    if tp.ndim == 2:
        tp = tp[np.arange(len(table)), table.actions.astype(np.int64)]
    if tp.shape != (len(table),):
        raise DataError(f"expected {len(table)} target propensities, got shape {tp.shape}")
    if np.any(tp < 0) or np.any(tp > 1) or not np.all(np.isfinite(tp)):
        raise DataError("target propensities must be probabilities")
    return tp / beh


def _discounted_rewards(table: TransitionTable, rewards, gamma: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape != (len(table),):
        raise DataError(f"expected {len(table)} rewards, got shape {r.shape}")
    return discount_weights(table.t_start, table.t_next, gamma) * r


def _per_episode_sum(table: TransitionTable, values: np.ndarray) -> np.ndarray:
    out = np.zeros(table.n_episodes)
    np.add.at(out, table.episode, values)
    return out


def _cumulative_ratios(table: TransitionTable, ratios: np.ndarray) -> np.ndarray:
    """Within-episode running product of ratios, row aligned."""
    n = len(table)
    if n == 0:
        return ratios.copy()
    starts = table.episode_starts()
    lengths = np.diff(np.append(starts, n))
    seg = np.repeat(np.arange(starts.size), lengths)
    pos = np.arange(n) - starts[seg]
    grid = np.ones((starts.size, int(lengths.max())))
    grid[seg, pos] = ratios
    return np.cumprod(grid, axis=1)[seg, pos]


def _mean_se(unit_values: np.ndarray):
    n = unit_values.size
    if n == 0:
        return 0.0, 0.0
    mean = float(unit_values.mean())
    if n == 1 or np.all(unit_values == unit_values[0]):
        return mean, 0.0
    se = float(unit_values.std(ddof=1) / np.sqrt(n))
    return mean, se


def _ess_or_zero(w: np.ndarray) -> float:
    if w.size == 0 or not np.any(w > 0):
        return 0.0
    return effective_sample_size(w)


def trajectory_is(data, rewards, target_propensities, gamma: float, self_normalized: bool = False) -> OpeEstimate:
    """Whole-episode importance weight times the discounted return."""
    table = _table(data)
    ratios = _ratios(table, target_propensities)
    disc_r = _discounted_rewards(table, rewards, gamma)
    n_ep = table.n_episodes
    weights = np.ones(n_ep)
    np.multiply.at(weights, table.episode, ratios)
    returns = _per_episode_sum(table, disc_r)
    if self_normalized and weights.sum() > 0:
        weights = weights * (n_ep / weights.sum())
    units = weights * returns
    value, se = _mean_se(units)
    return OpeEstimate(value, se, _ess_or_zero(weights), TRAJECTORY_IS, n_ep, n_ep,
                       WeightDiagnostics.from_weights(weights))


def per_decision_is(data, rewards, target_propensities, gamma: float, self_normalized: bool = False) -> OpeEstimate:
    """Each reward term weighted by the ratio product up to its own step."""
    table = _table(data)
    ratios = _ratios(table, target_propensities)
    disc_r = _discounted_rewards(table, rewards, gamma)
    w = _cumulative_ratios(table, ratios)
    if self_normalized and len(table):
        starts = table.episode_starts()
        lengths = np.diff(np.append(starts, len(table)))
        pos = np.arange(len(table)) - np.repeat(starts, lengths)
        # normalize each step position by the mean weight over all episodes
        sums = np.bincount(pos, weights=w)
        mean_w = sums / table.n_episodes + (table.n_episodes - np.bincount(pos)) / table.n_episodes
        w = w / np.where(mean_w > 0, mean_w, 1.0)[pos]
    units = _per_episode_sum(table, w * disc_r)
    value, se = _mean_se(units)
    return OpeEstimate(value, se, _ess_or_zero(w), PER_DECISION_IS, len(table), table.n_episodes,
                       WeightDiagnostics.from_weights(w))


def one_step_is(data, rewards, target_propensities, gamma: float, self_normalized: bool = False) -> OpeEstimate:
    """Per-step ratio only, no product over earlier steps."""
    table = _table(data)
    w = _ratios(table, target_propensities)
    disc_r = _discounted_rewards(table, rewards, gamma)
    if self_normalized and w.size and w.sum() > 0:
        w = w * (w.size / w.sum())
    units = _per_episode_sum(table, w * disc_r)
    value, se = _mean_se(units)
    return OpeEstimate(value, se, _ess_or_zero(w), ONE_STEP_IS, len(table), table.n_episodes,
                       WeightDiagnostics.from_weights(w))


ESTIMATORS = {
    TRAJECTORY_IS: trajectory_is,
    PER_DECISION_IS: per_decision_is,
    ONE_STEP_IS: one_step_is,
}


def empirical_mean_return(data, rewards, gamma: float) -> float:
    table = _table(data)
    units = _per_episode_sum(table, _discounted_rewards(table, rewards, gamma))
    return float(units.mean()) if units.size else 0.0


@dataclass
class PolicyEvaluation:
    estimates: Dict[str, OpeEstimate] = field(default_factory=dict)

    @property
    def ctr_proxy(self) -> Optional[float]:
        vol = self.estimates["volume"].value
        return self.estimates["clicks"].value / vol if vol > 0 else None

    def __getitem__(self, key: str) -> OpeEstimate:
        return self.estimates[key]


def metric_rewards(table: TransitionTable, prefs: PreferenceVector) -> Dict[str, np.ndarray]:
    """Per-transition observed reward streams for each reported metric."""
    return {
        "volume": (table.actions == Action.SEND).astype(np.float64),
        "sessions": table.rewards[:, 0].copy(),
        "clicks": table.rewards[:, 1].copy(),
        "scalarized": table.rewards @ prefs.as_array(),
    }


def evaluate_policy_metrics(
    data,
    target_propensities,
    prefs: PreferenceVector,
    gamma: float,
    metric_gamma: float = 1.0,
    estimator: str = ONE_STEP_IS,
    self_normalized: bool = False,
) -> PolicyEvaluation:
    """One estimate per metric plus the scalarized return.

    ``volume``, ``sessions`` and ``clicks`` are per-episode totals discounted
    with ``metric_gamma`` (1 = undiscounted); ``scalarized`` uses ``gamma``.
    ``target_propensities`` is either the probability of each logged action
    or the full (n, 2) action distribution under the evaluated policy.
    """
    table = _table(data)
    fn = ESTIMATORS[estimator]
    streams = metric_rewards(table, prefs)
    out = PolicyEvaluation()
    for name, r in streams.items():
        g = gamma if name == "scalarized" else metric_gamma
        out.estimates[name] = fn(table, r, target_propensities, g, self_normalized=self_normalized)
    return out
