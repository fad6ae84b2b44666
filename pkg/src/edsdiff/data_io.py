"""Toy datasets, checkpoint files and experiment configuration.

Checkpoint layout (all little-endian)::

    8 bytes   magic b"EDDPMCK1"
    8 bytes   uint64 length L of the metadata block
    L bytes   UTF-8 JSON metadata
    rest      float32 parameters in layer order: W0 (row-major), b0, W1, b1, ...
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .neural import MlpModel, param_count
from .numerics import RngStream

MAGIC = b"EDDPMCK1"
FORMAT_VERSION = 1
TIME_ENCODING = "t/T,sin(2pi t/T),cos(2pi t/T)"


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture; means default to K points on a circle."""

    K: int = 8
    radius: float = 6.0
    std: float = 0.3
    n_per_class: int = 1000
    seed: int = 0
    means: Optional[tuple] = None

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("mixture needs K >= 2")
        if self.std <= 0:
            raise ValueError("mixture std must be > 0")
        m = self.component_means()
        d = np.sqrt(((m[:, None] - m[None]) ** 2).sum(-1)) + np.eye(self.K)
        if np.any(d == 0):
            raise ValueError("mixture means must be pairwise distinct")

    def component_means(self) -> np.ndarray:
        if self.means is not None:
            m = np.asarray(self.means, dtype=np.float64)
            if m.ndim != 2 or len(m) != self.K:
                raise ValueError("means must be a K x d array")
            return m
        ang = 2 * np.pi * np.arange(self.K) / self.K
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def make_mixture(spec: MixtureSpec, rng: RngStream | None = None):
    """``n_per_class`` points from each component; returns (x, labels) ordered by class."""
    rng = rng or RngStream(spec.seed, 0)
    means = spec.component_means()
    n, d = spec.n_per_class, means.shape[1]
    x = np.concatenate([means[k] + spec.std * rng.normal((n, d)) for k in range(spec.K)])
    y = np.repeat(np.arange(spec.K), n)
    return x, y


# ---------------------------------------------------------------- checkpoints


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoint files."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


class CheckpointDimensionError(CheckpointError):
    pass


class CheckpointKindError(CheckpointError):
    pass


def save_checkpoint(model: MlpModel, metadata: dict, path) -> None:
    meta = dict(metadata)
    meta.update(
        format_version=FORMAT_VERSION,
        layer_dims=list(model.layer_dims),
        activation=model.activation,
        time_encoding=TIME_ENCODING,
        n_params=model.n_params,
    )
    if meta.get("kind") not in ("epsilon", "classifier"):
        raise ValueError("checkpoint metadata needs kind 'epsilon' or 'classifier'")
    blob = json.dumps(meta, sort_keys=True).encode()
    payload = model.flat_params().astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path, kind: str | None = None):
    """Read a checkpoint; returns (model with float64 params, metadata dict)."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    (n_meta,) = struct.unpack("<Q", data[8:16])
    if 16 + n_meta > len(data):
        raise CheckpointLengthError(f"{path}: metadata block truncated")
    try:
        meta = json.loads(data[16:16 + n_meta].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: metadata is not valid JSON ({e})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {meta.get('format_version')!r}")
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointKindError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    dims = meta.get("layer_dims")
    if (not isinstance(dims, list) or len(dims) < 2 or not all(isinstance(v, int) and v > 0 for v in dims)
            or meta.get("n_params") != param_count(dims)):
        raise CheckpointDimensionError(f"{path}: layer_dims {dims!r} inconsistent with n_params {meta.get('n_params')!r}")
    payload = data[16 + n_meta:]
    expected = 4 * param_count(dims)
    if len(payload) != expected:
        raise CheckpointLengthError(f"{path}: payload has {len(payload)} bytes, layer_dims imply {expected}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise CheckpointFormatError(f"{path}: non-finite parameters")
    shell = MlpModel(dims, [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
                     [np.zeros(o) for o in dims[1:]], meta.get("activation", "silu"))
    return shell.with_flat_params(flat), meta


# ---------------------------------------------------------------- configuration


class CsvFormatError(ValueError):
    """Malformed CSV input; the message carries ``path:line``."""


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the offending path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    K: int = Field(8, ge=2)
    radius: float = Field(6.0, gt=0)
    std: float = Field(0.3, gt=0)
    n_per_class: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)
    means: Optional[list[list[float]]] = None

    def spec(self) -> MixtureSpec:
        means = None if self.means is None else tuple(tuple(m) for m in self.means)
        return MixtureSpec(self.K, self.radius, self.std, self.n_per_class, self.seed, means)


class ScheduleConfig(_Strict):
    kind: Literal["linear"] = "linear"
    T: int = Field(1000, ge=2)
    beta_start: Optional[float] = None  # None -> 1e-4 * 1000/T
    beta_end: Optional[float] = None    # None -> 0.02 * 1000/T
    sigma_variant: Literal["beta", "beta_tilde"] = "beta"


class ModelsConfig(_Strict):
    eps_hidden: list[int] = Field(default_factory=lambda: [128, 128])
    clf_hidden: list[int] = Field(default_factory=lambda: [128, 64])
    activation: Literal["silu", "tanh"] = "silu"


class TrainingConfig(_Strict):
    eta: float = Field(0.2, ge=0)
    learning_rate: float = Field(1e-3, ge=0)
    batch_size: int = Field(128, ge=1)
    eps_steps: int = Field(30000, ge=1)
    clf_steps: int = Field(20000, ge=1)
    seed: int = Field(0, ge=0)
    eval_interval: int = Field(1000, ge=1)
    val_fraction: float = Field(0.1, ge=0, lt=1)


class SamplerSection(_Strict):
    method: Literal["ddpm", "ddim"] = "ddpm"
    steps: Optional[int] = Field(None, ge=1)
    ddim_eta: float = Field(0.0, ge=0)
    n_samples: int = Field(2000, ge=1)
    seed: int = Field(0, ge=0)
    chunk_size: int = Field(256, ge=1)
    workers: int = Field(1, ge=1)


class GuidanceSection(_Strict):
    scheme: Literal["none", "fixed", "range", "time", "gradnorm", "eds"] = "eds"
    s: float = Field(1.0, gt=0)
    C: float = Field(1.0, gt=0)
    M: float = Field(0.2, gt=0)
    t_cut: Optional[int] = Field(None, ge=1)  # None -> round(0.7 T), i.e. 700 at T=1000
    gamma: float = Field(1.0, gt=0)
    entropy_floor: float = Field(1e-8, gt=0)
    s_max: Optional[float] = Field(None, gt=0)


class MetricsSection(_Strict):
    k: int = Field(3, ge=1)
    n_real: int = Field(2000, ge=3)
    real_seed: int = Field(1, ge=0)
    threshold_fraction: float = Field(0.05, gt=0, lt=1)
    n_bins: int = Field(20, ge=1)
    crossing_mode: Literal["sustained", "first"] = "sustained"


class ExperimentConfig(_Strict):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    models: ModelsConfig = Field(default_factory=ModelsConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    guidance: GuidanceSection = Field(default_factory=GuidanceSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)

    def echo(self) -> str:
        return self.model_dump_json(indent=2)


def _check_semantics(cfg: ExperimentConfig) -> None:
    sch = cfg.schedule
    if sch.beta_start is not None and not 0 < sch.beta_start < 1:
        raise ConfigError("schedule.beta_start: must lie in (0, 1)")
    if sch.beta_end is not None and not 0 < sch.beta_end < 1:
        raise ConfigError("schedule.beta_end: must lie in (0, 1)")
    if (sch.beta_start is None) != (sch.beta_end is None):
        raise ConfigError("schedule.beta_start: set both endpoints or neither")
    if sch.beta_start is not None and sch.beta_start > sch.beta_end:
        raise ConfigError(f"schedule.beta_start: {sch.beta_start} exceeds beta_end {sch.beta_end}")
    if cfg.guidance.t_cut is not None and cfg.guidance.t_cut > sch.T:
        raise ConfigError(f"guidance.t_cut: {cfg.guidance.t_cut} exceeds T={sch.T}")
    if cfg.sampler.steps is not None and cfg.sampler.steps > sch.T:
        raise ConfigError(f"sampler.steps: {cfg.sampler.steps} exceeds T={sch.T}")
    if cfg.dataset.means is not None and len(cfg.dataset.means) != cfg.dataset.K:
        raise ConfigError("dataset.means: need exactly K means")


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(f"{loc}: {err['msg']}") from None
    _check_semantics(cfg)
    return cfg


def load_config(path=None) -> ExperimentConfig:
    """Parse a JSON experiment config; missing fields take their defaults."""
    if path is None:
        return config_from_dict({})
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"<root>: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a JSON object")
    return config_from_dict(data)
