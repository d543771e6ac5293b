"""Persistent reconstruction memories and temporal-inconsistency uncertainty."""
from __future__ import annotations

import numpy as np

__all__ = [
    "UNCERTAINTY_EPS",
    "rescale_to_memory_space",
    "uncertainty_map",
    "ema_rate",
    "ema_update",
    "MemoryBank",
]

UNCERTAINTY_EPS = 1e-12


def rescale_to_memory_space(xhat: np.ndarray) -> np.ndarray:
    """Map model space [-1, 1] to memory space [0, 1], clamping overshoot."""
    return np.clip((np.asarray(xhat, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def uncertainty_map(xhat_star: np.ndarray, memory: np.ndarray) -> np.ndarray:
    """Per-pixel channel-summed L1 deviation, normalized by its maximum.

    Works on single grids ``(H, W, C)`` or batches ``(B, H, W, C)``; the
    normalization is per grid. Returns zeros when the largest deviation is
    below ``UNCERTAINTY_EPS``.
    """
    xhat_star = np.asarray(xhat_star, dtype=np.float64)
    memory = np.asarray(memory, dtype=np.float64)
    if xhat_star.shape != memory.shape:
        raise ValueError(f"shape mismatch {xhat_star.shape} vs {memory.shape}")
    d = np.abs(xhat_star - memory).sum(axis=-1)
    peak = d.max(axis=(-2, -1), keepdims=True)
    safe = np.where(peak > UNCERTAINTY_EPS, peak, 1.0)
    return np.where(peak > UNCERTAINTY_EPS, d / safe, 0.0)


def ema_rate(window: int) -> float:
    if window < 1:
        raise ValueError("memory window must be >= 1")
    return 2.0 / (window + 1.0)


def ema_update(memory: np.ndarray, xhat_star: np.ndarray, window: int) -> np.ndarray:
    eta = ema_rate(window)
    memory = np.asarray(memory, dtype=np.float64)
    xhat_star = np.asarray(xhat_star, dtype=np.float64)
    if memory.shape != xhat_star.shape:
        raise ValueError(f"shape mismatch {memory.shape} vs {xhat_star.shape}")
    return (1.0 - eta) * memory + eta * xhat_star


class MemoryBank:
    """Reconstruction memory and latest uncertainty map per stable sample id."""

    def __init__(self, ids, memory: np.ndarray, uncertainty: np.ndarray | None = None):
        ids = np.asarray(ids, dtype=np.int64)
        memory = np.array(memory, dtype=np.float64)
        if memory.ndim != 4 or memory.shape[0] != ids.size:
            raise ValueError("memory must have shape (N, H, W, C) matching ids")
        if len(set(ids.tolist())) != ids.size:
            raise ValueError("sample ids must be unique")
        if np.any(memory < 0) or np.any(memory > 1):
            raise ValueError("memories must lie in [0, 1]")
        if uncertainty is None:
            uncertainty = np.zeros(memory.shape[:3])
        uncertainty = np.array(uncertainty, dtype=np.float64)
        if uncertainty.shape != memory.shape[:3]:
            raise ValueError("uncertainty must have shape (N, H, W)")
        self.ids = ids
        self.memory = memory
        self.uncertainty = uncertainty
        self._index = {int(i): k for k, i in enumerate(ids)}

    @classmethod
    def from_reconstructions(cls, ids, xhat: np.ndarray) -> MemoryBank:
        """Memories set to rescaled reconstructions, uncertainty all zeros."""
        return cls(ids, rescale_to_memory_space(xhat))

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._index[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"sample id {exc.args[0]} has no memory") from None

    def uncertainty_for(self, ids) -> np.ndarray:
        return self.uncertainty[self.rows(ids)].copy()

    def observe(self, ids, xhat: np.ndarray, window: int) -> np.ndarray:
        """Compute uncertainty against the current memories, then EMA-update them.

        Returns the new uncertainty maps (also stored for the next iteration).
        """
        rows = self.rows(ids)
        star = rescale_to_memory_space(xhat)
        u = uncertainty_map(star, self.memory[rows])
        # clip guards against one-ulp overshoot of the convex combination
        self.memory[rows] = np.clip(ema_update(self.memory[rows], star, window), 0.0, 1.0)
        self.uncertainty[rows] = u
        return u

    def copy(self) -> MemoryBank:
        return MemoryBank(self.ids.copy(), self.memory.copy(), self.uncertainty.copy())
