"""Training for the noise predictor and the noise-aware classifier.

The classifier objective is cross-entropy plus ``eta`` times the negative
entropy of the prediction (the KL to the uniform distribution minus its
constant ln K, which does not depend on the parameters).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .guidance import entropy
from .neural import (
    AdamState,
    ClassDistribution,
    MlpModel,
    adam_step,
    cross_entropy,
    forward,
    grad_params,
    init_mlp,
    model_input,
    softmax,
)
from .numerics import RngStream
from .schedule import NoiseSchedule, q_sample

log = logging.getLogger(__name__)

# stream indices under the training seed
_INIT, _SPLIT, _STEPS, _VAL = 0, 1, 2, 3

CLASSIFIER_COLUMNS = ["step", "ce", "ect", "total", "val_accuracy", "val_mean_entropy"]
EPSILON_COLUMNS = ["step", "loss", "val_loss"]


@dataclass
class TrainConfig:
    eta: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 128
    total_steps: int = 20000
    seed: int = 0
    eval_interval: int = 1000
    hidden: list[int] = field(default_factory=lambda: [128, 64])
    activation: str = "silu"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class LossBreakdown:
    """``ect`` is -H(p), i.e. KL(p || uniform) without its constant ln K."""

    ce: float
    ect: float
    total: float


def ect_loss(dist: ClassDistribution):
    h = entropy(dist)
    return -h


def total_loss(dist: ClassDistribution, label, eta: float) -> LossBreakdown:
    ce = float(np.mean(cross_entropy(dist, label)))
    ect = float(np.mean(ect_loss(dist)))
    return LossBreakdown(ce, ect, ce + eta * ect)


def classifier_loss_fn(eta: float):
    """Per-example CE + eta * (-H) and its gradient with respect to the logits."""

    def loss_fn(logits, labels):
        dist = softmax(logits)
        p, logp = dist.probs, dist.log_probs
        n = len(labels)
        ce = -logp[np.arange(n), labels]
        h = -np.sum(p * logp, axis=1)
        dlogits = p.copy()
        dlogits[np.arange(n), labels] -= 1.0
        if eta:
            # d(-H)/dz_j = p_j (log p_j + H)
            dlogits += eta * p * (logp + h[:, None])
        return ce - eta * h, dlogits

    return loss_fn


def mse_loss_fn(pred, target):
    diff = pred - target
    return np.sum(diff * diff, axis=1), 2.0 * diff


def split_dataset(x, y, seed: int, val_fraction: float):
    """Deterministic train/validation split; returns (x_tr, y_tr, x_val, y_val)."""
    n = len(x)
    perm = RngStream(seed, _SPLIT).generator.permutation(n)
    n_val = int(round(val_fraction * n))
    val, tr = perm[:n_val], perm[n_val:]
    ys = None if y is None else (y[tr], y[val])
    return x[tr], (None if ys is None else ys[0]), x[val], (None if ys is None else ys[1])


def _noisy_batch(schedule, x0, rng: RngStream, t=None):
    n = len(x0)
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=n)
    else:
        t = np.full(n, int(t))
    eps = rng.normal(x0.shape)
    return q_sample(schedule, x0, t, eps), t, eps


def classifier_metrics(model: MlpModel, schedule: NoiseSchedule, x0, y, seed: int, t=None):
    """(accuracy, mean predicted entropy) on noised x0 at fixed ``t`` or uniform t."""
    rng = RngStream(seed, _VAL)
    x_t, tt, _ = _noisy_batch(schedule, x0, rng, t)
    dist = softmax(forward(model, model_input(x_t, tt, schedule.T)))
    acc = float(np.mean(np.argmax(dist.probs, axis=1) == y))
    return acc, float(np.mean(entropy(dist)))


def clean_accuracy(model: MlpModel, schedule: NoiseSchedule, x0, y) -> float:
    """Accuracy on un-noised inputs presented at t = 1."""
    logits = forward(model, model_input(x0, 1, schedule.T))
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train_classifier(x, y, schedule: NoiseSchedule, config: TrainConfig, n_classes: int | None = None,
                     telemetry: list | None = None) -> MlpModel:
    """Train the noise-aware classifier on (x0, label) with loss CE + eta * ECT.

    Telemetry rows (CLASSIFIER_COLUMNS order) are appended to ``telemetry``
    every ``eval_interval`` steps and after the last one.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if len(x) == 0:
        raise ValueError("empty dataset")
    K = int(n_classes if n_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    x_tr, y_tr, x_val, y_val = split_dataset(x, y, config.seed, config.val_fraction)
    d = x.shape[1]
    model = init_mlp([d + 3, *config.hidden, K], RngStream(config.seed, _INIT), config.activation)
    state = AdamState.for_model(model)
    rng = RngStream(config.seed, _STEPS)
    loss_fn = classifier_loss_fn(config.eta)
    sums = np.zeros(3)
    count = 0
    for step in range(1, config.total_steps + 1):
        idx = rng.integers(0, len(x_tr), size=config.batch_size)
        x_t, t, _ = _noisy_batch(schedule, x_tr[idx], rng)
        inp = model_input(x_t, t, schedule.T)
        if telemetry is not None:
            lb = total_loss(softmax(forward(model, inp)), y_tr[idx], config.eta)
            sums += (lb.ce, lb.ect, lb.total)
            count += 1
        _, grads = grad_params(model, inp, y_tr[idx], loss_fn)
        model, state = adam_step(model, grads, state, config.learning_rate)
        if telemetry is not None and (step % config.eval_interval == 0 or step == config.total_steps):
            ce, ect, tot = sums / count
            if len(x_val):
                acc, ent = classifier_metrics(model, schedule, x_val, y_val, config.seed)
            else:
                acc = ent = float("nan")
            telemetry.append([step, ce, ect, tot, acc, ent])
            log.info("clf step %d ce=%.4f ect=%.4f total=%.4f val_acc=%.3f val_H=%.3f", step, ce, ect, tot, acc, ent)
            sums[:] = 0
            count = 0
    return model


def train_epsilon(x, schedule: NoiseSchedule, config: TrainConfig, telemetry: list | None = None) -> MlpModel:
    """Train the noise predictor with the plain mean-squared epsilon objective."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    x_tr, _, x_val, _ = split_dataset(x, None, config.seed, config.val_fraction)
    d = x.shape[1]
    model = init_mlp([d + 3, *config.hidden, d], RngStream(config.seed, _INIT), config.activation)
    state = AdamState.for_model(model)
    rng = RngStream(config.seed, _STEPS)
    total, count = 0.0, 0
    for step in range(1, config.total_steps + 1):
        idx = rng.integers(0, len(x_tr), size=config.batch_size)
        x_t, t, eps = _noisy_batch(schedule, x_tr[idx], rng)
        loss, grads = grad_params(model, model_input(x_t, t, schedule.T), eps, mse_loss_fn)
        model, state = adam_step(model, grads, state, config.learning_rate)
        total += loss
        count += 1
        if telemetry is not None and (step % config.eval_interval == 0 or step == config.total_steps):
            val = epsilon_loss(model, schedule, x_val, config.seed) if len(x_val) else float("nan")
            telemetry.append([step, total / count, val])
            log.info("eps step %d loss=%.4f val=%.4f", step, total / count, val)
            total, count = 0.0, 0
    return model


def epsilon_loss(model: MlpModel, schedule: NoiseSchedule, x0, seed: int, t=None) -> float:
    rng = RngStream(seed, _VAL)
    x_t, tt, eps = _noisy_batch(schedule, np.asarray(x0, dtype=np.float64), rng, t)
    pred = forward(model, model_input(x_t, tt, schedule.T))
    return float(np.mean(np.sum((pred - eps) ** 2, axis=1)))


def write_telemetry(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
