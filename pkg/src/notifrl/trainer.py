"""Offline Double-DQN training with a conservative (CQL) penalty.

The loss on a minibatch B is::

    alpha * mean_i[logsumexp(Q(s_i, .)) - Q(s_i, a_i)] + 0.5 * mean_i[(Q(s_i, a_i) - Y_i)^2]

with bootstrap targets ``Y_i = r_i + gamma**dt_i * Q'(s'_i, argmax_a Q(s'_i, a))``
held constant (semi-gradient). Terminal transitions drop the bootstrap
term. Action index 0 is NOT_SEND and 1 is SEND.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import TrainConfig, digest
from .dataset import Dataset
from .errors import DataError, DivergenceError, NumericalError, SupportError
from .mdp import N_ACTIONS, Action, TransitionTable
from .nn import (
    MlpGrads,
    MlpParams,
    OptState,
    init_mlp,
    logsumexp,
    mlp_backward,
    mlp_forward,
    opt_step,
    softmax,
)


@dataclass
class Batch:
    """Minibatch in network-input space (features already normalized)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    delta_t: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return int(self.actions.shape[0])


def _bootstrap_discount(batch: Batch, gamma: float) -> np.ndarray:
    disc = np.power(gamma, batch.delta_t)
    return np.where(batch.terminal, 0.0, disc)


def _finite_or_raise(q: np.ndarray, what: str) -> None:
    bad = ~np.all(np.isfinite(q), axis=-1)
    if np.any(bad):
        raise NumericalError(f"non-finite {what} at batch index {int(np.argmax(bad))}")


def dqn_target(batch: Batch, q_params: MlpParams, gamma: float) -> np.ndarray:
    """``r + gamma**dt * max_a Q(s', a)``; terminal rows give ``r``."""
    q_next = mlp_forward(q_params, batch.next_states)
    _finite_or_raise(q_next, "next-state Q")
    boot = np.where(batch.terminal, 0.0, q_next.max(axis=1))
    return batch.rewards + _bootstrap_discount(batch, gamma) * boot


def ddqn_target(batch: Batch, q_params: MlpParams, target_params: MlpParams, gamma: float) -> np.ndarray:
    """Online network picks the next action, target network scores it."""
    q_next = mlp_forward(q_params, batch.next_states)
    q_next_target = mlp_forward(target_params, batch.next_states)
    _finite_or_raise(q_next, "next-state Q")
    _finite_or_raise(q_next_target, "next-state target Q")
    chosen = np.argmax(q_next, axis=1)
    boot = q_next_target[np.arange(len(batch)), chosen]
    boot = np.where(batch.terminal, 0.0, boot)
    return batch.rewards + _bootstrap_discount(batch, gamma) * boot


def cql_penalty(q_row, logged_action) -> float:
    """``logsumexp(Q(s, .)) - Q(s, a_data)``; never negative."""
    q = np.asarray(q_row, dtype=np.float64)
    return logsumexp(q) - float(q[int(logged_action)])


@dataclass
class LossResult:
    loss: float
    bellman: float
    penalty: float
    grads: MlpGrads
    q_grad: np.ndarray  # dLoss/dQ(s, .) per row

    def __iter__(self):
        return iter((self.loss, self.grads))


def cql_loss_with_targets(
    batch: Batch, q_params: MlpParams, targets: np.ndarray, alpha: float
) -> LossResult:
    q = mlp_forward(q_params, batch.states)
    n = len(batch)
    rows = np.arange(n)
    a = batch.actions.astype(np.int64)
    q_data = q[rows, a]
    err = q_data - targets
    pen = logsumexp(q, axis=1) - q_data
    per_row = alpha * pen + 0.5 * err ** 2
    bad = ~np.isfinite(per_row)
    if np.any(bad):
        raise NumericalError(f"non-finite loss at batch index {int(np.argmax(bad))}")
    bellman = 0.5 * float(np.mean(err ** 2))
    penalty = float(np.mean(pen))
    onehot = np.zeros_like(q)
    onehot[rows, a] = 1.0
    dq = (alpha * (softmax(q, axis=1) - onehot) + onehot * err[:, None]) / n
    grads = mlp_backward(q_params, batch.states, dq)
    return LossResult(alpha * penalty + bellman, bellman, penalty, grads, dq)


def cql_loss(batch: Batch, q_params: MlpParams, target_params: MlpParams, config: TrainConfig) -> LossResult:
    """Composite conservative loss and its gradient with respect to ``q_params``.

    Unpacks as ``(loss, grads)``; the Bellman and penalty parts and
    dLoss/dQ are available as attributes.
    """
    if len(batch) == 0:
        raise DataError("empty minibatch")
    if config.target_kind == "dqn":
        targets = dqn_target(batch, q_params, config.gamma)
    else:
        targets = ddqn_target(batch, q_params, target_params, config.gamma)
    return cql_loss_with_targets(batch, q_params, targets, config.alpha)


@dataclass
class Smoothing:
    kind: str = "epsilon_greedy"  # epsilon_greedy | softmax | greedy
    epsilon: float = 0.05
    temperature: float = 1.0

    def validate(self, for_ope: bool = True) -> None:
        if self.kind == "epsilon_greedy":
            if not 0.0 <= self.epsilon <= 1.0:
                raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
            if for_ope and self.epsilon == 0.0:
                raise SupportError("epsilon = 0 gives a deterministic target policy without full support")
        elif self.kind == "softmax":
            if not self.temperature > 0:
                raise ValueError("softmax temperature must be positive")
        elif self.kind == "greedy":
            if for_ope:
                raise SupportError("a greedy target policy has no full support for importance sampling")
        else:
            raise ValueError(f"unknown smoothing {self.kind!r}")

    @classmethod
    def from_config(cls, ope_cfg) -> "Smoothing":
        return cls(ope_cfg.smoothing, ope_cfg.epsilon, ope_cfg.temperature)


@dataclass
class QPolicy:
    params: MlpParams
    schema: Tuple[str, ...] = ()
    feature_offset: Optional[np.ndarray] = None
    feature_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.params.layer_dims[-1] != N_ACTIONS:
            raise DataError(f"Q-network must output {N_ACTIONS} values")
        d = self.params.layer_dims[0]
        if self.feature_offset is None:
            self.feature_offset = np.zeros(d)
        if self.feature_scale is None:
            self.feature_scale = np.ones(d)
        self.schema = tuple(self.schema)

    def inputs(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        return (s - self.feature_offset) / self.feature_scale

    def q_values(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        single = s.ndim == 1
        q = mlp_forward(self.params, self.inputs(s.reshape(1, -1) if single else s))
        return q[0] if single else q

    def sim_policy(self, smoothing: Smoothing) -> Callable[[np.ndarray], np.ndarray]:
        """Adapter for the simulator: state vector -> action probabilities."""
        smoothing.validate(for_ope=False)
        return lambda state: policy_propensity(self, state, smoothing)


def greedy_action(policy: QPolicy, s):
    """argmax_a Q(s, a); exact ties go to NOT_SEND."""
    q = policy.q_values(s)
    idx = np.argmax(q, axis=-1)  # first maximum, i.e. NOT_SEND on ties
    if np.ndim(idx) == 0:
        return Action(int(idx))
    return idx


def propensities_from_q(q: np.ndarray, smoothing: Smoothing) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if smoothing.kind == "softmax":
        return softmax(q / smoothing.temperature, axis=-1)
    eps = 0.0 if smoothing.kind == "greedy" else smoothing.epsilon
    greedy = np.argmax(q, axis=-1)
    probs = np.full(q.shape, eps / N_ACTIONS)
    if q.ndim == 1:
        probs[greedy] += 1.0 - eps
    else:
        probs[np.arange(q.shape[0]), greedy] += 1.0 - eps
    return probs


def policy_propensity(policy: QPolicy, s, smoothing: Smoothing) -> np.ndarray:
    """Smoothed action distribution; rows sum to one."""
    return propensities_from_q(policy.q_values(s), smoothing)


@dataclass
class TrainReport:
    bellman: np.ndarray
    penalty: np.ndarray
    total: np.ndarray
    epochs: List[Dict] = field(default_factory=list)
    n_steps: int = 0
    target_syncs: int = 0
    config_digest: str = ""

    def rows(self):
        for i in range(self.n_steps):
            yield i + 1, float(self.bellman[i]), float(self.penalty[i]), float(self.total[i])


def _normalization(states: np.ndarray, enabled: bool) -> Tuple[np.ndarray, np.ndarray]:
    d = states.shape[1]
    if not enabled or states.shape[0] == 0:
        return np.zeros(d), np.ones(d)
    mu = states.mean(axis=0)
    sd = states.std(axis=0)
    return mu, np.where(sd > 0, sd, 1.0)


def train(
    data,
    rewards: Sequence[float],
    config: TrainConfig,
    schema: Sequence[str] = (),
    callback: Optional[Callable[[int, MlpParams, MlpParams], None]] = None,
) -> Tuple[QPolicy, TrainReport]:
    """Double Q-learning with the conservative penalty on a fixed dataset.

    Runs exactly ``(len(D) // batch_size) * epochs`` SGD steps on minibatches
    drawn uniformly with replacement, copying the online weights into the
    target network every ``target_sync_every`` steps. ``callback`` is
    invoked after each step with ``(step, params, target_params)``.
    """
    table: TransitionTable = data.table() if isinstance(data, Dataset) else data
    if isinstance(data, Dataset):
        schema = data.schema
    rewards = np.asarray(rewards, dtype=np.float64)
    n_data = len(table)
    if rewards.shape != (n_data,):
        raise DataError(f"expected {n_data} scalar rewards, got shape {rewards.shape}")
    if not np.all(np.isfinite(rewards)):
        raise DataError("scalar rewards contain non-finite values")
    m = config.batch_size
    if config.epochs > 0 and n_data < m:
        raise DataError(f"dataset has {n_data} transitions, fewer than batch size {m}")

    d = table.states.shape[1]
    offset, scale = _normalization(table.states, config.normalize_features)
    x = (table.states - offset) / scale
    x_next = (table.next_states - offset) / scale
    dt = table.t_next - table.t_k
    actions = table.actions.astype(np.int64)

    rng = np.random.default_rng(config.seed)
    params = init_mlp([d, *config.hidden_dims, N_ACTIONS], rng, config.activation)
    target = params.copy()
    opt = OptState(config.optimizer if config.optimizer == "sgd" else "momentum",
                   config.learning_rate, config.momentum if config.optimizer == "momentum" else 0.0)

    steps_per_epoch = n_data // m if m else 0
    total = steps_per_epoch * config.epochs
    bell = np.zeros(total)
    pen = np.zeros(total)
    tot = np.zeros(total)
    report = TrainReport(bell, pen, tot, n_steps=total, config_digest=digest(config))

    for step in range(1, total + 1):
        idx = rng.integers(0, n_data, size=m)
        batch = Batch(x[idx], actions[idx], rewards[idx], x_next[idx], dt[idx], table.terminal[idx])
        try:
            # overflow is detected explicitly and reported as divergence
            with np.errstate(over="ignore", invalid="ignore"):
                res = cql_loss(batch, params, target, config)
                params, opt = opt_step(params, res.grads, opt)
        except NumericalError as err:
            raise DivergenceError(
                f"training diverged at step {step}: {err}", step=step,
                diagnostics={"last_total_loss": float(tot[step - 2]) if step > 1 else None},
            ) from err
        bell[step - 1], pen[step - 1], tot[step - 1] = res.bellman, res.penalty, res.loss
        if step % config.target_sync_every == 0:
            target = params.copy()
            report.target_syncs += 1
        if callback is not None:
            callback(step, params, target)
        if step % steps_per_epoch == 0:
            q_all = mlp_forward(params, x)
            report.epochs.append({
                "epoch": step // steps_per_epoch,
                "step": step,
                "mean_q_data": float(np.mean(q_all[np.arange(n_data), actions])),
                "mean_logsumexp_q": float(np.mean(logsumexp(q_all, axis=1))),
                "mean_max_q": float(np.mean(q_all.max(axis=1))),
                "mean_loss": float(np.mean(tot[step - steps_per_epoch:step])),
            })

    policy = QPolicy(params, tuple(schema), offset, scale)
    return policy, report
