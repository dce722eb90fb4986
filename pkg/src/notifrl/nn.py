"""Fully-connected Q-network with hand-derived gradients and SGD.

Matrices are float64 numpy arrays. Weight ``i`` has shape
``(layer_dims[i], layer_dims[i + 1])`` so a batch is propagated as
``x @ W + b``. Hidden layers apply the configured activation, the output
layer is linear.

Flattening order (used by checkpoints and finite-difference checks): layers
in order, each weight matrix row-major, then that layer's bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from .errors import NumericalError, ShapeError


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


@dataclass
class MlpParams:
    layer_dims: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need one weight matrix and one bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != want:
                raise ShapeError(f"weight[{i}] has shape {w.shape}, expected {want}")
            if b.shape != (self.layer_dims[i + 1],):
                raise ShapeError(f"bias[{i}] has shape {b.shape}, expected ({self.layer_dims[i + 1]},)")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        """Return a copy whose parameters are read from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ShapeError(f"flat vector has {flat.size} entries, expected {self.size}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(flat[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(flat[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(list(self.layer_dims), weights, biases, self.activation)

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def equals(self, other: "MlpParams") -> bool:
        return (
            self.layer_dims == other.layer_dims
            and self.activation == other.activation
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


@dataclass
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)


def init_mlp(
    layer_dims: Sequence[int],
    rng: np.random.Generator,
    activation: Activation | str = Activation.RELU,
) -> MlpParams:
    """He-uniform weights for ReLU, Xavier-uniform for tanh, zero biases."""
    activation = Activation(activation)
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ShapeError(f"invalid layer dims {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        if activation is Activation.RELU:
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(dims, weights, biases, activation)


def zeros_like_params(params: MlpParams) -> MlpParams:
    return MlpParams(
        list(params.layer_dims),
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        params.activation,
    )


def _act(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(z: np.ndarray, a: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _check_inputs(params: MlpParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"inputs must be 2-D (batch x features), got ndim={x.ndim}")
    if x.shape[1] != params.layer_dims[0]:
        raise ShapeError(
            f"inputs have {x.shape[1]} columns but the network expects {params.layer_dims[0]}"
        )
    return x


def _forward_cache(params: MlpParams, x: np.ndarray):
    pre, post = [], [x]
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _act(z, params.activation)
        post.append(h)
    return pre, post


def mlp_forward(params: MlpParams, inputs) -> np.ndarray:
    """Q-values for every row of ``inputs``; shape ``(batch, d_out)``."""
    x = _check_inputs(params, inputs)
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i != last:
            h = _act(h, params.activation)
    return h


def mlp_backward(params: MlpParams, inputs, output_grads) -> MlpGrads:
    """Gradients of a loss with respect to every weight and bias.

    ``output_grads`` holds dLoss/dOutput for each row; the forward pass is
    recomputed internally.
    """
    x = _check_inputs(params, inputs)
    g = np.asarray(output_grads, dtype=np.float64)
    want = (x.shape[0], params.layer_dims[-1])
    if g.shape != want:
        raise ShapeError(f"output_grads has shape {g.shape}, expected {want}")
    pre, post = _forward_cache(params, x)
    n = params.n_layers
    gw: List[Optional[np.ndarray]] = [None] * n
    gb: List[Optional[np.ndarray]] = [None] * n
    delta = g
    for i in range(n - 1, -1, -1):
        gw[i] = post[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * _act_grad(pre[i - 1], post[i], params.activation)
    return MlpGrads(gw, gb)


@dataclass
class OptState:
    kind: str = "sgd"  # "sgd" | "momentum"
    learning_rate: float = 1e-3
    momentum: float = 0.0
    velocity: Optional[MlpGrads] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "momentum"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def opt_step(params: MlpParams, grads: MlpGrads, state: OptState):
    """One optimizer update; returns ``(new_params, new_state)``.

    SGD: ``theta -= lr * g``. Momentum: ``v = mu * v + g; theta -= lr * v``.
    """
    if len(grads.weights) != params.n_layers:
        raise ShapeError("gradient structure does not match parameters")
    for i, (gw, gb) in enumerate(zip(grads.weights, grads.biases)):
        if gw.shape != params.weights[i].shape or gb.shape != params.biases[i].shape:
            raise ShapeError(f"gradient shape mismatch in layer {i}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericalError(f"non-finite gradient in layer {i}")

    lr = state.learning_rate
    if state.kind == "sgd":
        new_w = [w - lr * g for w, g in zip(params.weights, grads.weights)]
        new_b = [b - lr * g for b, g in zip(params.biases, grads.biases)]
        new_state = state
    else:
        if state.velocity is None:
            vw = [g.copy() for g in grads.weights]
            vb = [g.copy() for g in grads.biases]
        else:
            mu = state.momentum
            vw = [mu * v + g for v, g in zip(state.velocity.weights, grads.weights)]
            vb = [mu * v + g for v, g in zip(state.velocity.biases, grads.biases)]
        new_w = [w - lr * v for w, v in zip(params.weights, vw)]
        new_b = [b - lr * v for b, v in zip(params.biases, vb)]
        new_state = OptState(state.kind, lr, state.momentum, MlpGrads(vw, vb))
    return MlpParams(list(params.layer_dims), new_w, new_b, params.activation), new_state


def logsumexp(values, axis: Optional[int] = None):
    """Stable ``log(sum(exp(values)))``, reducing over ``axis`` (all if None)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty input")
    m = np.max(v, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(values, axis: int = -1) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)
