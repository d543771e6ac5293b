"""Perturbed posterior bridge draws, plain and uncertainty-weighted."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import gaussian_sample
from .schedule import ScheduleTable, _per_sample

__all__ = ["BridgeDraw", "sample_bridge", "sample_bridge_uncertain", "inference_input"]


@dataclass(frozen=True)
class BridgeDraw:
    a: np.ndarray | float
    sigma_a: np.ndarray | float
    sigma_bar_a: np.ndarray | float
    z: np.ndarray
    y_a: np.ndarray


def _bridge(x0, y_img, a, h, z, sched, noise_gain=None) -> BridgeDraw:
    x0 = np.asarray(x0, dtype=np.float64)
    y_img = np.asarray(y_img, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not (x0.shape == y_img.shape == z.shape):
        raise ValueError(f"shape mismatch: x0 {x0.shape}, y {y_img.shape}, z {z.shape}")
    if h < 0:
        raise ValueError("h must be non-negative")
    sigma_a, sigma_bar = sched.bridge_coeffs(a)
    s = _per_sample(sigma_a, x0.ndim)
    sb = _per_sample(sigma_bar, x0.ndim)
    noise = z if noise_gain is None else z * noise_gain
    y_a = (1.0 - s) * y_img + s * x0 + (h * sb) * noise
    return BridgeDraw(a=a, sigma_a=sigma_a, sigma_bar_a=sigma_bar, z=z, y_a=y_a)


def sample_bridge(x0, y_img, a, h: float, z, sched: ScheduleTable) -> BridgeDraw:
    """``y_a = (1 - sigma_a) y + sigma_a x0 + h sigma_bar_a z``.

    ``a`` is a scalar, or one value per leading batch entry.
    """
    return _bridge(x0, y_img, a, h, z, sched)


def sample_bridge_uncertain(
    x0, y_img, a, h: float, z, u, lam: float, sched: ScheduleTable
) -> BridgeDraw:
    """Bridge whose noise is amplified per pixel by ``1 + lam * u``.

    ``u`` holds one value per pixel (``(H, W)`` or ``(B, H, W)``) in [0, 1] and
    is broadcast across channels. ``lam == 0`` reproduces :func:`sample_bridge`
    bit for bit.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    u = np.asarray(u, dtype=np.float64)
    if np.any(u < 0) or np.any(u > 1) or np.any(~np.isfinite(u)):
        raise ValueError("uncertainty values must lie in [0, 1]")
    if u.shape != np.shape(z)[:-1]:
        raise ValueError(f"uncertainty shape {u.shape} does not match pixels of {np.shape(z)}")
    if lam == 0:
        return _bridge(x0, y_img, a, h, z, sched)
    return _bridge(x0, y_img, a, h, z, sched, noise_gain=(1.0 + lam * u)[..., None])


def inference_input(y_img, h: float, rng: np.random.Generator) -> np.ndarray:
    """Generator input ``y + h z`` for single-pass posterior sampling."""
    if h < 0:
        raise ValueError("h must be non-negative")
    y_img = np.asarray(y_img, dtype=np.float64)
    if h == 0:
        return y_img.copy()
    return y_img + h * gaussian_sample(rng, y_img.shape)
