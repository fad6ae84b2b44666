"""DDPM ancestral and DDIM samplers with classifier guidance and per-step telemetry.

Randomness: sample ``i`` owns the stream ``RngStream(seed, i)``.  It first
draws x_T, then exactly one Gaussian vector per DDPM step (also at t = 1, where
the draw is discarded) or per stochastic DDIM step.  Guidance never consumes
randomness.  Samples are processed in fixed chunks of ``chunk_size``; the
chunking, not the worker count, determines floating-point evaluation order, so
sequential and threaded runs agree bitwise.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .guidance import GuidanceScheme, NoGuidance, GuidanceStepRecord, guided_gradient_batch, validate_scheme
from .neural import MlpModel, forward, model_input
from .numerics import RngStream
from .schedule import NoiseSchedule, posterior_variance


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniform-stride subsequence T, T - T/steps, ..., then 1; rounded and deduplicated."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    seq = [int(round(T - k * T / steps)) for k in range(steps)] + [1]
    out = []
    for t in seq:
        if t >= 1 and (not out or t < out[-1]):
            out.append(t)
    return out


def predict_eps(eps_model: MlpModel, schedule: NoiseSchedule, x_t, t: int) -> np.ndarray:
    return forward(eps_model, model_input(x_t, t, schedule.T))


def ddpm_mean(eps_model, schedule: NoiseSchedule, x_t, t: int) -> np.ndarray:
    """(1/sqrt(alpha_t)) (x_t - (1 - alpha_t)/sqrt(1 - alpha_bar_t) * eps_theta(x_t, t))."""
    t = schedule.check_t(t)
    eps = predict_eps(eps_model, schedule, x_t, t)
    a, ab = schedule.alphas[t], schedule.alpha_bars[t]
    return (np.atleast_2d(x_t) - (1.0 - a) / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)


def ddpm_step(eps_model, schedule: NoiseSchedule, x_t, t: int, g_prime, noise, variant: str = "beta") -> np.ndarray:
    """x_{t-1} = mu + sigma_t^2 g' + sigma_t z, with z ignored at t = 1."""
    single = np.ndim(x_t) == 1
    var = posterior_variance(schedule, t, variant)
    mu = ddpm_mean(eps_model, schedule, x_t, t)
    x = mu + var * np.atleast_2d(g_prime)
    if t > 1:
        x = x + np.sqrt(var) * np.atleast_2d(noise)
    return x[0] if single else x


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    """eta * sqrt((1 - ab_prev)/(1 - ab_t)) * sqrt(1 - ab_t/ab_prev); eta = 0 is deterministic."""
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    return float(eta * np.sqrt((1 - ab_prev) / (1 - ab)) * np.sqrt(1 - ab / ab_prev))


def ddim_step(eps_model, schedule: NoiseSchedule, x_t, t: int, t_prev: int, g_prime, sigma: float = 0.0,
              noise=None) -> np.ndarray:
    if not schedule.T >= t > t_prev >= 0:
        raise ValueError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    rest = 1.0 - ab_prev - sigma * sigma
    if rest < 0:
        raise ValueError(f"sigma^2 = {sigma * sigma} exceeds 1 - alpha_bar_prev = {1.0 - ab_prev}")
    single = np.ndim(x_t) == 1
    x_t = np.atleast_2d(x_t)
    eps = predict_eps(eps_model, schedule, x_t, t) - np.sqrt(1.0 - ab) * np.atleast_2d(g_prime)
    x0_pred = (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    x = np.sqrt(ab_prev) * x0_pred + np.sqrt(rest) * eps
    if sigma > 0:
        if noise is None:
            raise ValueError("stochastic DDIM step needs a noise draw")
        x = x + sigma * np.atleast_2d(noise)
    return x[0] if single else x


@dataclass
class SamplerConfig:
    method: str = "ddpm"            # ddpm | ddim
    steps: int | None = None        # DDIM step count; DDPM always uses all T steps
    sigma_variant: str = "beta"     # DDPM reverse variance
    ddim_eta: float = 0.0           # DDIM stochasticity; 0 = deterministic
    scheme: GuidanceScheme = field(default_factory=NoGuidance)
    seed: int = 0
    n_samples: int = 16
    chunk_size: int = 256
    workers: int = 1

    def timesteps(self, T: int) -> list[int]:
        if self.method == "ddpm":
            return list(range(T, 0, -1))
        if self.method == "ddim":
            return ddim_timesteps(T, self.steps or T)
        raise ValueError(f"unknown sampling method {self.method!r}")


@dataclass
class Trajectory:
    """Telemetry for one sample; arrays are ordered by decreasing t."""

    sample_id: int
    label: int | None
    t: np.ndarray
    entropy: np.ndarray
    grad_norm: np.ndarray
    scale: np.ndarray
    scheme: str
    x0: np.ndarray

    @property
    def records(self) -> list[GuidanceStepRecord]:
        return [GuidanceStepRecord(int(t), float(h), float(g), float(s), self.scheme)
                for t, h, g, s in zip(self.t, self.entropy, self.grad_norm, self.scale)]

    def __len__(self) -> int:
        return len(self.t)


def _run_chunk(eps_model, classifier, schedule, config: SamplerConfig, ids, labels, ts):
    T = schedule.T
    d = eps_model.layer_dims[-1]
    streams = [RngStream(config.seed, int(i)) for i in ids]
    x = np.stack([s.normal(d) for s in streams])
    n, n_steps = len(ids), len(ts)
    tele = np.full((3, n, n_steps), np.nan)
    lab = None if labels is None else np.asarray(labels)
    for k, t in enumerate(ts):
        if lab is None:
            gb = guided_gradient_batch(None, x, t, T, None, NoGuidance())
        else:
            gb = guided_gradient_batch(classifier, x, t, T, lab, config.scheme)
        tele[0, :, k], tele[1, :, k], tele[2, :, k] = gb.entropy, gb.grad_norm, gb.scale
        if config.method == "ddpm":
            z = np.stack([s.normal(d) for s in streams])
            x = ddpm_step(eps_model, schedule, x, t, gb.g_prime, z, config.sigma_variant)
        else:
            t_prev = ts[k + 1] if k + 1 < n_steps else 0
            sigma = ddim_sigma(schedule, t, t_prev, config.ddim_eta)
            z = np.stack([s.normal(d) for s in streams]) if sigma > 0 else None
            x = ddim_step(eps_model, schedule, x, t, t_prev, gb.g_prime, sigma, z)
    return x, tele


def sample_batch(eps_model: MlpModel, classifier: MlpModel | None, schedule: NoiseSchedule,
                 config: SamplerConfig, labels=None):
    """Generate ``config.n_samples`` points; returns (samples, trajectories) ordered by sample_id."""
    guided = not isinstance(config.scheme, NoGuidance)
    if guided and classifier is None:
        raise ValueError(f"guidance scheme {config.scheme.tag!r} needs a classifier")
    if guided and labels is None:
        raise ValueError("conditional sampling needs labels")
    validate_scheme(config.scheme, schedule.T)
    n = config.n_samples
    if labels is not None:
        labels = np.asarray(labels, dtype=int)
        if labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    use_labels = labels if classifier is not None else None
    ts = config.timesteps(schedule.T)
    chunks = [np.arange(a, min(a + config.chunk_size, n)) for a in range(0, n, config.chunk_size)]

    def job(ids):
        return _run_chunk(eps_model, classifier, schedule, config, ids,
                          None if use_labels is None else use_labels[ids], ts)

    if config.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as ex:
            results = list(ex.map(job, chunks))
    else:
        results = [job(c) for c in chunks]

    samples = np.concatenate([r[0] for r in results])
    tele = np.concatenate([r[1] for r in results], axis=1)
    t_arr = np.asarray(ts)
    trajs = [
        Trajectory(i, None if labels is None else int(labels[i]), t_arr, tele[0, i], tele[1, i], tele[2, i],
                   config.scheme.tag, samples[i])
        for i in range(n)
    ]
    return samples, trajs


TRAJECTORY_COLUMNS = ["sample_id", "label", "t", "entropy", "grad_norm", "scale", "scheme"]
SAMPLE_COLUMNS = ["sample_id", "label"]


def _label_str(label):
    return "" if label is None else str(label)


def write_trajectories(path, trajectories) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAJECTORY_COLUMNS)
        for tr in trajectories:
            for t, h, g, s in zip(tr.t, tr.entropy, tr.grad_norm, tr.scale):
                w.writerow([tr.sample_id, _label_str(tr.label), int(t), repr(float(h)), repr(float(g)),
                            repr(float(s)), tr.scheme])


def write_samples(path, samples, labels=None) -> None:
    samples = np.atleast_2d(samples)
    d = samples.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SAMPLE_COLUMNS + [f"x{j}" for j in range(d)])
        for i, row in enumerate(samples):
            lab = None if labels is None else int(labels[i])
            w.writerow([i, _label_str(lab)] + [repr(float(v)) for v in row])


def _csv_rows(path, expected):
    from .data_io import CsvFormatError

    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:len(expected)] != expected:
            raise CsvFormatError(f"{path}:1: expected header starting with {','.join(expected)}")
        for row in reader:
            if row:
                yield reader.line_num, header, row


def read_samples(path):
    """Inverse of ``write_samples``: returns (samples, labels or None)."""
    from .data_io import CsvFormatError

    xs, labels = [], []
    for line, header, row in _csv_rows(path, SAMPLE_COLUMNS):
        if len(row) != len(header):
            raise CsvFormatError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        try:
            xs.append([float(v) for v in row[2:]])
            labels.append(None if row[1] == "" else int(row[1]))
        except ValueError as e:
            raise CsvFormatError(f"{path}:{line}: {e}") from None
    if not xs:
        raise CsvFormatError(f"{path}: no samples")
    if any(lab is None for lab in labels):
        return np.array(xs), None
    return np.array(xs), np.array(labels)


def read_trajectories(path) -> list[Trajectory]:
    """Inverse of ``write_trajectories`` (final x0 is not stored and comes back empty)."""
    from .data_io import CsvFormatError

    groups: dict[int, dict] = {}
    for line, header, row in _csv_rows(path, TRAJECTORY_COLUMNS):
        if len(row) != len(TRAJECTORY_COLUMNS):
            raise CsvFormatError(f"{path}:{line}: expected {len(TRAJECTORY_COLUMNS)} fields, got {len(row)}")
        try:
            sid = int(row[0])
            label = None if row[1] == "" else int(row[1])
            vals = (int(row[2]), float(row[3]), float(row[4]), float(row[5]))
        except ValueError as e:
            raise CsvFormatError(f"{path}:{line}: {e}") from None
        g = groups.setdefault(sid, {"label": label, "scheme": row[6], "rows": []})
        if g["rows"] and vals[0] >= g["rows"][-1][0]:
            raise CsvFormatError(f"{path}:{line}: timesteps of sample {sid} are not strictly decreasing")
        g["rows"].append(vals)
    if not groups:
        raise CsvFormatError(f"{path}: no trajectory rows")
    out = []
    for sid in sorted(groups):
        g = groups[sid]
        cols = np.array(g["rows"], dtype=float).T
        out.append(Trajectory(sid, g["label"], cols[0].astype(int), cols[1], cols[2], cols[3], g["scheme"],
                              np.empty(0)))
    return out
