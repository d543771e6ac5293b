"""Discrete diffusion noise schedule and its continuous-time extension."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ScheduleTable", "linear_schedule"]


@dataclass(frozen=True, eq=False)
class ScheduleTable:
    """Betas for timesteps ``1..T`` (stored 0-based) and derived quantities.

    The continuous rate ``beta(tau)`` on ``tau in [0, 1]`` interpolates
    ``T * beta_i`` linearly between nodes ``tau_i = i / T``, with the first
    rate held flat on ``[0, 1/T]``, so ``exp(-int_0^1 beta)`` tracks
    ``alpha_bar_T``.
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if betas.size == 0 or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must be non-empty and lie in (0, 1)")
        betas = betas.copy()
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        ab = np.cumprod(1.0 - betas)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bars", ab)
        T = betas.size
        rates = T * np.concatenate([betas[:1], betas])
        cum = np.concatenate([[0.0], np.cumsum((rates[:-1] + rates[1:]) / (2.0 * T))])
        object.__setattr__(self, "_rates", rates)
        object.__setattr__(self, "_cum", cum)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @property
    def beta_total(self) -> float:
        return float(self._cum[-1])

    def _check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T) or np.any(t != np.floor(t)):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        return t.astype(np.int64)

    def alpha_bar(self, t):
        """``alpha_bar_t`` for integer ``t`` (scalar or array) in ``1..T``."""
        return self.alpha_bars[self._check_t(t) - 1]

    def rate(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        return np.interp(tau, np.arange(self.T + 1) / self.T, self._rates)

    def integral(self, a):
        """Closed-form ``int_0^a beta(tau) dtau`` for ``a in [0, 1]``."""
        a = np.asarray(a, dtype=np.float64)
        if np.any(a < 0) or np.any(a > 1) or np.any(~np.isfinite(a)):
            raise ValueError(f"bridge position must lie in [0, 1], got {a}")
        T = self.T
        k = np.minimum(np.floor(a * T).astype(np.int64), T - 1)
        left = k / T
        partial = (a - left) * (self._rates[k] + self.rate(a)) / 2.0
        return np.where(a == 1.0, self._cum[-1], self._cum[k] + partial)

    def diffuse(self, x0: np.ndarray, t, z: np.ndarray) -> np.ndarray:
        """``sqrt(ab_t) x0 + sqrt(1 - ab_t) z``; ``t`` may be per-sample for batches."""
        ab = _per_sample(self.alpha_bar(t), np.ndim(x0))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z

    def ikl_weight(self, t):
        """IKL weight ``sqrt(ab_t) / sqrt(1 - ab_t)``."""
        ab = self.alpha_bar(t)
        return np.sqrt(ab) / np.sqrt(1.0 - ab)

    def bridge_coeffs(self, a):
        """Interpolation weight ``sigma_a`` and noise scale ``sigma_bar_a`` at bridge position ``a``."""
        inner = self.integral(a)
        total = self._cum[-1]
        sigma_a = (total - inner) / total
        sigma_bar = np.sqrt(-np.expm1(-inner))
        if np.ndim(sigma_a) == 0:
            return float(sigma_a), float(sigma_bar)
        return sigma_a, sigma_bar


def _per_sample(v, ndim: int):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def linear_schedule(T: int, beta_start: float, beta_end: float) -> ScheduleTable:
    if T < 1:
        raise ValueError("T must be positive")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return ScheduleTable(np.linspace(beta_start, beta_end, T))
