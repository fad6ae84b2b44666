"""Multilayer perceptron with hand-written reverse-mode gradients.

Everything works on batches: inputs are ``(n, d_in)`` arrays, outputs
``(n, d_out)``.  A single vector is accepted too and treated as ``n = 1``.
Weights are stored as ``(d_out, d_in)`` so a layer computes ``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import RngStream, logsumexp

ACTIVATIONS = ("silu", "tanh")


def _act(name, z):
    if name == "silu":
        with np.errstate(over="ignore"):  # exp overflow gives s = 0, which is the right limit
            s = 1.0 / (1.0 + np.exp(-z))
        return z * s, s
    if name == "tanh":
        a = np.tanh(z)
        return a, a
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, aux):
    if name == "silu":
        # d/dz z*sigmoid(z) = s + z*s*(1-s)
        return aux * (1.0 + z * (1.0 - aux))
    return 1.0 - aux * aux


@dataclass
class MlpModel:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "silu"

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"bad layer_dims {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError("number of weight/bias arrays does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer {i}: expected W{shape}, b({shape[0]},), got {w.shape}, {b.shape}")

    @property
    def n_params(self) -> int:
        return param_count(self.layer_dims)

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in storage order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def with_params(self, arrays: list[np.ndarray]) -> "MlpModel":
        return MlpModel(list(self.layer_dims), list(arrays[0::2]), list(arrays[1::2]), self.activation)

    def with_flat_params(self, flat: np.ndarray) -> "MlpModel":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        arrays, pos = [], 0
        for p in self.params():
            arrays.append(flat[pos:pos + p.size].reshape(p.shape).copy())
            pos += p.size
        return self.with_params(arrays)

    def copy(self) -> "MlpModel":
        return self.with_params([p.copy() for p in self.params()])


def param_count(layer_dims) -> int:
    return sum(o * i + o for i, o in zip(layer_dims[:-1], layer_dims[1:]))


def init_mlp(layer_dims, rng: RngStream, activation: str = "silu") -> MlpModel:
    """Gaussian init with std 1/sqrt(fan_in); zero biases."""
    weights, biases = [], []
    for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(rng.normal((d_out, d_in)) / np.sqrt(d_in))
        biases.append(np.zeros(d_out))
    return MlpModel(list(layer_dims), weights, biases, activation)


def zeros_like_params(model: MlpModel) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in model.params()]


def time_features(t, T: int) -> np.ndarray:
    """[t/T, sin(2 pi t/T), cos(2 pi t/T)] for scalar or per-row timesteps."""
    u = np.asarray(t, dtype=np.float64) / T
    return np.stack([u, np.sin(2 * np.pi * u), np.cos(2 * np.pi * u)], axis=-1)


def model_input(x: np.ndarray, t, T: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tf = time_features(np.broadcast_to(np.asarray(t), (x.shape[0],)), T)
    return np.concatenate([x, tf], axis=1)


def _as_batch(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ValueError(f"input dim {x.shape[-1]} does not match model input dim {model.layer_dims[0]}")
    return x


def _forward_cached(model: MlpModel, x: np.ndarray):
    cache = [(x, None, None)]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        if i == last:
            return z, cache
        h, aux = _act(model.activation, z)
        cache.append((h, z, aux))
    raise AssertionError("unreachable")


def forward(model: MlpModel, x) -> np.ndarray:
    """Network output; a 1-D input returns a 1-D output."""
    single = np.ndim(x) == 1
    out, _ = _forward_cached(model, _as_batch(model, x))
    return out[0] if single else out


def _backward(model: MlpModel, cache, dout: np.ndarray, need_params: bool = True):
    """Propagate dL/d(output) back; returns (param grads in storage order, dL/dx)."""
    grads = [None] * (2 * len(model.weights))
    delta = dout
    for i in range(len(model.weights) - 1, -1, -1):
        h_in = cache[i][0]
        if need_params:
            grads[2 * i] = delta.T @ h_in
            grads[2 * i + 1] = delta.sum(axis=0)
        dh = delta @ model.weights[i]
        if i == 0:
            return grads, dh
        _, z, aux = cache[i]
        delta = dh * _act_grad(model.activation, z, aux)
    raise AssertionError("unreachable")


@dataclass
class ClassDistribution:
    """Categorical distribution(s) over K classes; batched along leading axes."""

    probs: np.ndarray
    log_probs: np.ndarray

    @property
    def K(self) -> int:
        return self.probs.shape[-1]


def softmax(logits) -> ClassDistribution:
    logits = np.asarray(logits, dtype=np.float64)
    log_probs = logits - logsumexp(logits, axis=-1)[..., None]
    return ClassDistribution(np.exp(log_probs), log_probs)


def cross_entropy(dist: ClassDistribution, label):
    label = np.asarray(label)
    K = dist.K
    if np.any(label < 0) or np.any(label >= K):
        raise ValueError(f"label out of range for K={K}")
    if dist.log_probs.ndim == 1:
        return float(-dist.log_probs[int(label)])
    return -np.take_along_axis(dist.log_probs, label.reshape(-1, 1).astype(int), axis=1)[:, 0]


# loss_fn(outputs, targets) -> (per-example losses, dloss/doutputs per example)
LossFn = Callable[[np.ndarray, np.ndarray], "tuple[np.ndarray, np.ndarray]"]


def grad_params(model: MlpModel, inputs, targets, loss_fn: LossFn):
    """Mean batch loss and its gradient w.r.t. every parameter (storage order)."""
    x = _as_batch(model, inputs)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    out, cache = _forward_cached(model, x)
    losses, dout = loss_fn(out, targets)
    if dout.shape != out.shape:
        raise ValueError(f"loss gradient shape {dout.shape} does not match output {out.shape}")
    grads, _ = _backward(model, cache, dout / n)
    return float(np.mean(losses)), grads


def log_prob_and_input_grad(model: MlpModel, x, labels):
    """Class distribution at ``x`` and d log p(label | x) / dx, row by row."""
    xb = _as_batch(model, x)
    labels = np.broadcast_to(np.asarray(labels, dtype=int), (xb.shape[0],))
    logits, cache = _forward_cached(model, xb)
    dist = softmax(logits)
    K = dist.K
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"label out of range for K={K}")
    # d log p_y / d logits = onehot(y) - p
    dout = -dist.probs
    dout[np.arange(len(labels)), labels] += 1.0
    _, dx = _backward(model, cache, dout, need_params=False)
    return dist, dx


def grad_input_log_prob(model: MlpModel, x, label) -> np.ndarray:
    single = np.ndim(x) == 1
    _, dx = log_prob_and_input_grad(model, x, label)
    return dx[0] if single else dx


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: MlpModel, **kw) -> "AdamState":
        return cls(zeros_like_params(model), zeros_like_params(model), **kw)


def adam_step(model: MlpModel, grads: list[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update; returns (new model, new state)."""
    params = model.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient does not match model parameter shapes")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1 - b1 ** step
    c2 = 1 - b2 ** step
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return model.with_params(new), AdamState(m, v, step, b1, b2, state.eps)
