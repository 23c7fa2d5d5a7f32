"""Variance schedules, forward noising, the epsilon-MSE objective and ancestral sampling.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and the arrays
of :class:`NoiseSchedule` are indexed with ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ConfigError, Rng, Tensor, mse, no_grad

NoisePredictor = Callable[[Tensor, int, Tensor | None], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")

    def beta_at(self, t: int) -> float:
        self._check(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self._check(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product up to ``t``; ``alpha_bar_at(0) == 1``."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_schedule(d["T"], d["beta_start"], d["beta_end"])


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def default_schedule(T: int = 100) -> NoiseSchedule:
    # DDPM's 1e-4..0.02 endpoints are tuned for T=1000; scale them so the
    # chain still ends near N(0, I) when T is shortened.
    scale = 1000.0 / T
    return make_schedule(T, 1e-4 * scale, min(0.02 * scale, 0.999))


def q_sample(x0: Tensor, t: int, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """Closed-form forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    s._check(t)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    ab = s.alpha_bar[t - 1]
    return x0 * np.float32(np.sqrt(ab)) + eps * np.float32(np.sqrt(1.0 - ab))


def ddpm_loss(model: NoisePredictor, x0: Tensor, t: int, cond: Tensor | None, rng: Rng, s: NoiseSchedule) -> Tensor:
    eps = Tensor(rng.normal(x0.shape))
    x_t = q_sample(x0, t, eps, s)
    return mse(model(x_t, t, cond), eps)


def p_sample_step(
    model: NoisePredictor, x_t: Tensor, t: int, cond: Tensor | None, s: NoiseSchedule, rng: Rng
) -> Tensor:
    """One ancestral step x_t -> x_{t-1} with fixed variance sigma_t^2 = beta_t."""
    s._check(t)
    beta = s.beta[t - 1]
    alpha = s.alpha[t - 1]
    ab = s.alpha_bar[t - 1]
    with no_grad():
        eps_hat = model(x_t, t, cond).data
    mean = (x_t.data - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t > 1:
        mean = mean + np.sqrt(beta) * rng.normal(x_t.shape, dtype=np.float64)
    return Tensor(mean.astype(np.float32))


def denoise(
    model: NoisePredictor,
    x_start: Tensor,
    t_start: int,
    cond: Tensor | None,
    s: NoiseSchedule,
    rng: Rng,
    clip_output: bool = True,
) -> Tensor:
    """Run the reverse chain from ``t_start`` down to 1; ``t_start == 0`` is a no-op."""
    x = x_start
    for t in range(t_start, 0, -1):
        x = p_sample_step(model, x, t, cond, s, rng)
    if clip_output and t_start > 0:
        x = Tensor(np.clip(x.data, -1.0, 1.0))
    return x


@dataclass(frozen=True)
class SamplerConfig:
    seed: int
    clip_output: bool = True


def sample(model: NoisePredictor, shape: tuple, cond: Tensor | None, s: NoiseSchedule, cfg: SamplerConfig) -> Tensor:
    rng = Rng(cfg.seed)
    x_T = Tensor(rng.normal(shape))
    return denoise(model, x_T, s.T, cond, s, rng, cfg.clip_output)


def noise_to_step(x_in: Tensor, strength: float, s: NoiseSchedule, rng: Rng) -> tuple[Tensor, int]:
    """Partially noise ``x_in`` for image-to-image.

    ``t_start = round(strength * T)``. At full strength the start is the pure
    Gaussian draw itself, so the chain is the same as text-to-image for the seed.
    """
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"strength must be in [0, 1], got {strength}")
    t_start = int(np.floor(strength * s.T + 0.5))  # half-up, not banker's rounding
    if t_start == 0:
        return x_in, 0
    eps = Tensor(rng.normal(x_in.shape))
    if t_start == s.T:
        return eps, t_start
    return q_sample(x_in, t_start, eps, s), t_start
