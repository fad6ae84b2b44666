"""Classifier-gradient guidance and its scaling schemes.

Each scheme turns (t, entropy of the classifier prediction, raw gradient norm)
into a positive scale ``s``; the guided gradient is ``s * grad log p(y | x_t)``.
Entropies are in nats.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Union

import numpy as np

from .neural import ClassDistribution, MlpModel, log_prob_and_input_grad, model_input


@dataclass(frozen=True)
class NoGuidance:
    tag = "none"


@dataclass(frozen=True)
class Fixed:
    s: float = 1.0
    tag = "fixed"


@dataclass(frozen=True)
class RangeConstant:
    """Unscaled while t > t_cut, scale C afterwards."""

    C: float = 1.0
    t_cut: int = 700
    tag = "range"


@dataclass(frozen=True)
class TimeAware:
    """s = C * (T - t); zero at t = T."""

    C: float = 1.0
    tag = "time"


@dataclass(frozen=True)
class GradNorm:
    """s = 1 while the raw gradient norm is below M, else C."""

    C: float = 1.0
    M: float = 0.2
    tag = "gradnorm"


@dataclass(frozen=True)
class EDS:
    gamma: float = 1.0
    entropy_floor: float = 1e-8
    s_max: float | None = None  # None -> 1e4 * gamma

    @property
    def s_cap(self) -> float:
        return 1e4 * self.gamma if self.s_max is None else self.s_max

    tag = "eds"


GuidanceScheme = Union[NoGuidance, Fixed, RangeConstant, TimeAware, GradNorm, EDS]

SCHEMES = {cls.tag: cls for cls in (NoGuidance, Fixed, RangeConstant, TimeAware, GradNorm, EDS)}


def make_scheme(tag: str, **params) -> GuidanceScheme:
    """Build a scheme from its tag and hyperparameters, validating them."""
    try:
        cls = SCHEMES[tag]
    except KeyError:
        raise ValueError(f"unknown guidance scheme {tag!r}; expected one of {sorted(SCHEMES)}") from None
    scheme = cls(**params)
    validate_scheme(scheme)
    return scheme


def validate_scheme(scheme: GuidanceScheme, T: int | None = None) -> None:
    for k, v in asdict(scheme).items():
        if v is not None and not v > 0:
            raise ValueError(f"{scheme.tag}.{k} must be > 0, got {v}")
    if isinstance(scheme, RangeConstant) and T is not None and not 1 <= scheme.t_cut <= T:
        raise ValueError(f"range.t_cut must lie in [1, {T}]")
    if isinstance(scheme, EDS) and scheme.s_cap < scheme.gamma:
        raise ValueError("eds.s_max must be >= gamma")


def scheme_params(scheme: GuidanceScheme) -> dict:
    return {"scheme": scheme.tag, **asdict(scheme)}


def entropy(dist: ClassDistribution):
    """-sum p log p with 0 log 0 = 0; one value per distribution."""
    p = dist.probs
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, -p * dist.log_probs, 0.0)
    h = terms.sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def eds_scale(dist: ClassDistribution, gamma: float, entropy_floor: float = 1e-8, s_max: float | None = None):
    """gamma * ln K / max(H, floor), capped at s_max."""
    if s_max is None:
        s_max = 1e4 * gamma
    return _eds_from_entropy(entropy(dist), dist.K, gamma, entropy_floor, s_max)


def _eds_from_entropy(h, K, gamma, entropy_floor, s_max):
    s = gamma * np.log(K) / np.maximum(h, entropy_floor)
    s = np.minimum(s, s_max)
    return float(s) if np.ndim(s) == 0 else s


def scale_factor(scheme: GuidanceScheme, t: int, T: int, entropy, grad_norm, K: int | None = None):
    """Scale for one step; ``entropy``/``grad_norm`` may be per-sample arrays.

    EDS needs the class count ``K`` for its ln K normalizer.
    """
    shape = np.shape(grad_norm) if np.ndim(grad_norm) else np.shape(entropy)
    ones = np.ones(shape)
    if isinstance(scheme, NoGuidance):
        s = 0.0 * ones
    elif isinstance(scheme, Fixed):
        s = scheme.s * ones
    elif isinstance(scheme, RangeConstant):
        s = (1.0 if t > scheme.t_cut else scheme.C) * ones
    elif isinstance(scheme, TimeAware):
        s = scheme.C * (T - t) * ones
    elif isinstance(scheme, GradNorm):
        s = np.where(np.asarray(grad_norm) < scheme.M, 1.0, scheme.C) * ones
    elif isinstance(scheme, EDS):
        if K is None:
            raise ValueError("EDS scaling needs the class count K")
        s = _eds_from_entropy(np.asarray(entropy, dtype=np.float64), K, scheme.gamma, scheme.entropy_floor, scheme.s_cap) * ones
    else:
        raise TypeError(f"not a guidance scheme: {scheme!r}")
    return float(s) if s.ndim == 0 else s


@dataclass
class GuidanceStepRecord:
    t: int
    entropy: float
    grad_norm: float
    scale: float
    scheme: str


@dataclass
class GuidanceBatch:
    """Guided gradients for a batch plus the per-sample telemetry columns."""

    g_prime: np.ndarray
    entropy: np.ndarray
    grad_norm: np.ndarray
    scale: np.ndarray
    t: int
    scheme: str

    def records(self) -> list[GuidanceStepRecord]:
        return [
            GuidanceStepRecord(self.t, float(h), float(n), float(s), self.scheme)
            for h, n, s in zip(self.entropy, self.grad_norm, self.scale)
        ]


def guided_gradient_batch(classifier: MlpModel | None, x_t, t: int, T: int, labels, scheme: GuidanceScheme,
                          telemetry: bool = True) -> GuidanceBatch:
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    n, d = x_t.shape
    if isinstance(scheme, NoGuidance) and (classifier is None or not telemetry):
        nan = np.full(n, np.nan)
        return GuidanceBatch(np.zeros_like(x_t), nan, nan, np.zeros(n), t, scheme.tag)
    if classifier is None:
        raise ValueError(f"scheme {scheme.tag!r} needs a classifier")
    dist, dx = log_prob_and_input_grad(classifier, model_input(x_t, t, T), labels)
    g = dx[:, :d]  # drop the time-feature columns
    h = entropy(dist)
    h = np.atleast_1d(h)
    gn = np.sqrt(np.sum(g * g, axis=1))
    s = np.atleast_1d(scale_factor(scheme, t, T, h, gn, K=dist.K))
    if isinstance(scheme, NoGuidance):
        g_prime = np.zeros_like(x_t)
    else:
        g_prime = s[:, None] * g
    return GuidanceBatch(g_prime, h, gn, s, t, scheme.tag)


def guided_gradient(classifier: MlpModel | None, x_t, t: int, T: int, y: int, scheme: GuidanceScheme):
    """Single-sample guided gradient g' and its telemetry record."""
    b = guided_gradient_batch(classifier, np.asarray(x_t)[None, :], t, T, [y], scheme)
    return b.g_prime[0], b.records()[0]
