"""Linear variance schedule and the closed-form forward (noising) process.

Timesteps are 1-indexed, t in {1..T}.  Every per-step array has length T+1 and
slot 0 holds the t=0 convention (beta_0 = 0, alpha_bar_0 = 1), so
``schedule.alpha_bars[t]`` reads exactly like the math.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_VARIANTS = ("beta", "beta_tilde")

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
MAX_BETA = 0.999


def default_endpoints(T: int) -> tuple[float, float]:
    """(1e-4, 0.02) at T=1000, scaled by 1000/T for other lengths (capped below 1 for T <= 20)."""
    scale = 1000.0 / T
    return min(DEFAULT_BETA_START * scale, MAX_BETA), min(DEFAULT_BETA_END * scale, MAX_BETA)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray  # beta_tilde_t

    def check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return int(t)

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_linear(T: int, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    d_start, d_end = default_endpoints(T)
    beta_start = d_start if beta_start is None else float(beta_start)
    beta_end = d_end if beta_end is None else float(beta_end)
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")

    betas = np.empty(T + 1)
    betas[0] = 0.0
    betas[1:] = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)  # alpha_bars[0] = 1
    post = np.zeros(T + 1)
    post[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    for arr in (betas, alphas, alpha_bars, post):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta_start, beta_end, betas, alphas, alpha_bars, post)


def q_sample(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; ``t`` may be per-row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep outside [1, {schedule.T}]")
    ab = schedule.alpha_bars[t]
    if t.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def posterior_variance(schedule: NoiseSchedule, t: int, variant: str = "beta") -> float:
    """Reverse-step variance sigma_t^2: beta_t, or beta_tilde_t (0 at t=1)."""
    t = schedule.check_t(t)
    if variant == "beta":
        return float(schedule.betas[t])
    if variant == "beta_tilde":
        return float(schedule.posterior_vars[t])
    raise ValueError(f"unknown sigma variant {variant!r}")


def posterior_sigma(schedule: NoiseSchedule, t: int, variant: str = "beta") -> float:
    return float(np.sqrt(posterior_variance(schedule, t, variant)))
