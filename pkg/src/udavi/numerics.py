"""Seeded randomness, dense linear algebra and finite-difference gradients.

Images are plain float64 ndarrays of shape (H, W, C), batches (B, H, W, C),
stored row-major with channels last.
"""
from __future__ import annotations

import enum
from typing import Callable

import numpy as np
from scipy.linalg import lapack

__all__ = [
    "Stream",
    "make_rng",
    "gaussian_sample",
    "finite_diff_gradient",
    "cholesky",
    "cholesky_solve",
    "NotPositiveDefiniteError",
    "NonFiniteError",
]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (Cholesky failed at pivot {pivot})")
        self.pivot = pivot


class NonFiniteError(FloatingPointError):
    pass


class Stream(enum.IntEnum):
    """Purpose tags that keep independent random streams apart."""

    DATA = 1
    MEASURE = 2
    SPLIT = 3
    BATCH = 4
    TRAIN = 5
    WARMUP = 6
    MEMORY_INIT = 7
    INFER = 8
    EVAL = 9
    INIT = 10


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *keys)``.

    Streams for distinct key tuples are statistically independent, so
    per-sample noise does not depend on batch order or worker scheduling.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in keys]
    if any(k < 0 for k in words):
        raise ValueError("stream keys must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def gaussian_sample(rng: np.random.Generator, shape) -> np.ndarray:
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape must be positive, got {shape}")
    return rng.standard_normal(shape)


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(f(x))
        flat[k] = orig - step
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value around coordinate {k}")
        gflat[k] = (fp - fm) / (2.0 * step)
    return grad


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises NotPositiveDefiniteError naming the failing pivot."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("matrix has non-finite entries")
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info))
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return c


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``."""
    c = cholesky(a)
    x, info = lapack.dpotrs(c, np.asarray(b, dtype=np.float64), lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return x
