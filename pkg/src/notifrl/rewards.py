"""Reward prediction models and scalar reward construction.

Three reward formulas are supported, differing only in which components
are observed and which are predicted:

* observed sessions, observed clicks, observed volume
* observed sessions, predicted clicks, observed volume
* predicted sessions, predicted clicks, observed volume

The volume term is always the observed ``-1`` per send.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, DataError
from .mdp import Action, PreferenceVector, TransitionTable


def _as_table(data) -> TransitionTable:
    return data.table() if isinstance(data, Dataset) else data


def _canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # fits see rows in a fixed order, so they do not depend on dataset order
    keys = np.column_stack([x, y])
    return np.lexsort(keys.T[::-1])


def _standardize(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return mu, sd


def _split(n: int, holdout_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    if holdout_fraction <= 0 or n < 2:
        return np.arange(n), np.zeros(0, dtype=np.int64)
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = min(max(1, int(round(holdout_fraction * n))), n - 1)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ClickModel:
    weights: np.ndarray
    intercept: float
    schema: Tuple[str, ...] = ()
    diagnostics: Dict = field(default_factory=dict)


@dataclass
class SessionModel:
    # index 0: NOT_SEND, index 1: SEND
    weights: List[np.ndarray]
    intercepts: List[float]
    schema: Tuple[str, ...] = ()
    diagnostics: Dict = field(default_factory=dict)


def _log_loss(p: np.ndarray, y: np.ndarray) -> float:
    eps = 1e-15
    p = np.clip(p, eps, 1 - eps)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def fit_click_model(
    data,
    iterations: int = 500,
    seed: int = 0,
    holdout_fraction: float = 0.0,
    schema: Sequence[str] = (),
) -> ClickModel:
    """Logistic regression of the click label on SEND transitions.

    Full-batch gradient descent on standardized features with step size
    ``1/L`` (L = smoothness constant of the mean log loss), so the training
    loss never increases. Coefficients are returned in raw feature units.
    """
    table = _as_table(data)
    if isinstance(data, Dataset):
        schema = data.schema
    send = table.actions == Action.SEND
    if not np.any(send):
        raise DataError("click model needs at least one SEND transition; the dataset has none")
    x_all = table.states[send]
    y_all = table.rewards[send, 1]
    train_idx, hold_idx = _split(x_all.shape[0], holdout_fraction, seed)
    x, y = x_all[train_idx], y_all[train_idx]
    order = _canonical_order(x, y)
    x, y = x[order], y[order]

    mu, sd = _standardize(x)
    z = np.column_stack([np.ones(x.shape[0]), (x - mu) / sd])
    n = z.shape[0]
    lipschitz = 0.25 * float(np.linalg.eigvalsh(z.T @ z / n)[-1])
    lr = 1.0 / lipschitz
    theta = np.zeros(z.shape[1])
    losses = []
    for _ in range(iterations):
        p = _sigmoid(z @ theta)
        losses.append(_log_loss(p, y))
        theta -= lr * (z.T @ (p - y)) / n
    losses.append(_log_loss(_sigmoid(z @ theta), y))

    w = theta[1:] / sd
    b = float(theta[0] - np.sum(theta[1:] * mu / sd))
    diag = {"train_loss": losses[-1], "loss_history": losses, "n_train": int(n), "seed": seed}
    if hold_idx.size:
        ph = _sigmoid(x_all[hold_idx] @ w + b)
        diag["holdout_loss"] = _log_loss(ph, y_all[hold_idx])
        diag["n_holdout"] = int(hold_idx.size)
    return ClickModel(w, b, tuple(schema), diag)


def predict_click(model: ClickModel, s, a) -> np.ndarray | float:
    """Predicted click probability; exactly 0 wherever the action is NOT_SEND."""
    s_arr = np.asarray(s, dtype=np.float64)
    if s_arr.shape[-1] != model.weights.shape[0]:
        raise DataError(
            f"state has {s_arr.shape[-1]} features, click model expects {model.weights.shape[0]}"
        )
    p = _sigmoid(s_arr @ model.weights + model.intercept)
    out = np.where(np.asarray(a) == Action.SEND, p, 0.0)
    return float(out) if out.ndim == 0 else out


def fit_session_model(
    data,
    seed: int = 0,
    holdout_fraction: float = 0.0,
    schema: Sequence[str] = (),
) -> SessionModel:
    """Per-action least-squares regression of visits on state features."""
    table = _as_table(data)
    if isinstance(data, Dataset):
        schema = data.schema
    weights, intercepts, diag = [], [], {"seed": seed}
    for action in (Action.NOT_SEND, Action.SEND):
        rows = table.actions == action
        if not np.any(rows):
            raise DataError(f"session model needs both actions; no {action.name} transitions present")
        x_all = table.states[rows]
        y_all = table.rewards[rows, 0]
        train_idx, hold_idx = _split(x_all.shape[0], holdout_fraction, seed)
        x, y = x_all[train_idx], y_all[train_idx]
        order = _canonical_order(x, y)
        x, y = x[order], y[order]
        design = np.column_stack([np.ones(x.shape[0]), x])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        weights.append(coef[1:])
        intercepts.append(float(coef[0]))
        resid = y - design @ coef
        diag[f"{action.name.lower()}_train_mse"] = float(np.mean(resid ** 2))
        diag[f"{action.name.lower()}_n_train"] = int(x.shape[0])
        if hold_idx.size:
            pred = np.maximum(x_all[hold_idx] @ coef[1:] + coef[0], 0.0)
            diag[f"{action.name.lower()}_holdout_mse"] = float(np.mean((y_all[hold_idx] - pred) ** 2))
    return SessionModel(weights, intercepts, tuple(schema), diag)


def predict_sessions(model: SessionModel, s, a) -> np.ndarray | float:
    s_arr = np.asarray(s, dtype=np.float64)
    width = model.weights[0].shape[0]
    if s_arr.shape[-1] != width:
        raise DataError(f"state has {s_arr.shape[-1]} features, session model expects {width}")
    a_arr = np.asarray(a)
    raw_ns = s_arr @ model.weights[0] + model.intercepts[0]
    raw_s = s_arr @ model.weights[1] + model.intercepts[1]
    out = np.maximum(np.where(a_arr == Action.SEND, raw_s, raw_ns), 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class RewardSpec:
    prefs: PreferenceVector
    use_predicted_clicks: bool = False
    use_predicted_sessions: bool = False
    click_model: Optional[ClickModel] = None
    session_model: Optional[SessionModel] = None

    def validate(self) -> None:
        if self.use_predicted_clicks and self.click_model is None:
            raise ConfigError("reward spec uses predicted clicks but no click model is attached")
        if self.use_predicted_sessions and self.session_model is None:
            raise ConfigError("reward spec uses predicted sessions but no session model is attached")

    @property
    def formula(self) -> str:
        s = "predicted" if self.use_predicted_sessions else "observed"
        c = "predicted" if self.use_predicted_clicks else "observed"
        return f"sessions={s},clicks={c},volume=observed"


def reward_components(data, spec: RewardSpec) -> np.ndarray:
    """(n, 3) matrix of the session/click/volume terms the reward spec selects."""
    spec.validate()
    table = _as_table(data)
    comps = table.rewards.copy()
    if spec.use_predicted_sessions:
        comps[:, 0] = predict_sessions(spec.session_model, table.states, table.actions)
    if spec.use_predicted_clicks:
        comps[:, 1] = predict_click(spec.click_model, table.states, table.actions)
    return comps


def build_scalar_rewards(data, spec: RewardSpec) -> np.ndarray:
    """One scalar reward per transition: preference-weighted components."""
    return reward_components(data, spec) @ spec.prefs.as_array()
