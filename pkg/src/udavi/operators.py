"""Linear measurement operators: Gaussian blur and average-pool downsampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .numerics import gaussian_sample

__all__ = ["ForwardOperator", "make_gaussian_kernel", "DENSE_CAP"]

DENSE_CAP = 4096


def make_gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian on a ``size x size`` grid, normalized to unit sum."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


@lru_cache(maxsize=64)
def _reflect_index(n: int, r: int) -> np.ndarray:
    # symmetric padding: edge sample is repeated (..., 1, 0 | 0, 1, ... | n-1, n-2, ...)
    idx = np.arange(-r, n + r)
    period = 2 * n
    idx = np.mod(idx, period)
    idx = np.where(idx >= n, period - 1 - idx, idx)
    idx.setflags(write=False)
    return idx


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (H, W, C) or (B, H, W, C) array, got shape {x.shape}")


@dataclass(frozen=True)
class ForwardOperator:
    """Blur (``kind="blur"``) or average-pool super-resolution (``kind="sr"``).

    The blur uses symmetric (edge-repeating) boundary padding; the kernel is
    stored truncated and renormalized to unit sum.
    """

    kind: str
    kernel: np.ndarray | None = None
    factor: int = 1
    noise_sigma: float = 0.0
    boundary: str = field(default="reflect")

    def __post_init__(self):
        if self.kind not in ("blur", "sr"):
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.kind == "blur":
            k = np.asarray(self.kernel, dtype=np.float64)
            if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
                raise ValueError("blur kernel must be square with odd size")
            if abs(k.sum() - 1.0) > 1e-12:
                raise ValueError("blur kernel must sum to 1")
            if not np.allclose(k, k[::-1, ::-1], rtol=0, atol=1e-15):
                raise ValueError("blur kernel must be symmetric under 180-degree rotation")
            k = k.copy()
            k.setflags(write=False)
            object.__setattr__(self, "kernel", k)
        elif self.factor < 1:
            raise ValueError("sr factor must be a positive integer")

    @classmethod
    def gaussian_blur(cls, size: int, sigma: float, noise_sigma: float = 0.0) -> ForwardOperator:
        return cls("blur", kernel=make_gaussian_kernel(size, sigma), noise_sigma=noise_sigma)

    @classmethod
    def avg_pool(cls, factor: int, noise_sigma: float = 0.0) -> ForwardOperator:
        return cls("sr", factor=int(factor), noise_sigma=noise_sigma)

    def output_shape(self, shape) -> tuple[int, int, int]:
        h, w, c = shape
        if self.kind == "blur":
            return (h, w, c)
        f = self.factor
        if h % f or w % f:
            raise ValueError(f"sr factor {f} does not divide grid {h}x{w}")
        return (h // f, w // f, c)

    def apply(self, x: np.ndarray) -> np.ndarray:
        xb, single = _as_batch(x)
        _, h, w, _ = xb.shape
        if self.kind == "blur":
            k = self.kernel
            r = k.shape[0] // 2
            xp = xb[:, _reflect_index(h, r)][:, :, _reflect_index(w, r)]
            out = np.zeros_like(xb)
            for i in range(k.shape[0]):
                for j in range(k.shape[1]):
                    out += k[i, j] * xp[:, i : i + h, j : j + w]
        else:
            oh, ow, _ = self.output_shape(xb.shape[1:])
            f = self.factor
            out = xb.reshape(xb.shape[0], oh, f, ow, f, xb.shape[3]).mean(axis=(2, 4))
        return out[0] if single else out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Exact transpose of :meth:`apply`, boundary folding included."""
        yb, single = _as_batch(y)
        b, h, w, c = yb.shape
        if self.kind == "blur":
            k = self.kernel
            r = k.shape[0] // 2
            gp = np.zeros((b, h + 2 * r, w + 2 * r, c))
            for i in range(k.shape[0]):
                for j in range(k.shape[1]):
                    gp[:, i : i + h, j : j + w] += k[i, j] * yb
            rows = np.zeros((b, h, w + 2 * r, c))
            np.add.at(rows, (slice(None), _reflect_index(h, r)), gp)
            out = np.zeros((b, h, w, c))
            np.add.at(out, (slice(None), slice(None), _reflect_index(w, r)), rows)
        else:
            f = self.factor
            out = np.repeat(np.repeat(yb, f, axis=1), f, axis=2) / (f * f)
        return out[0] if single else out

    def lift(self, y: np.ndarray) -> np.ndarray:
        """Measurement placed on the image grid (nearest-neighbour block replication for SR)."""
        if self.kind == "blur":
            return np.asarray(y, dtype=np.float64)
        yb, single = _as_batch(y)
        f = self.factor
        out = np.repeat(np.repeat(yb, f, axis=1), f, axis=2)
        return out[0] if single else out

    def measure(self, x0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        clean = self.apply(x0)
        if self.noise_sigma == 0:
            return clean
        return clean + self.noise_sigma * gaussian_sample(rng, clean.shape)

    def as_dense_matrix(self, shape, cap: int = DENSE_CAP) -> np.ndarray:
        """Matrix ``M`` with ``M @ x.ravel() == apply(x).ravel()`` for grids of ``shape``."""
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape))
        if n > cap:
            raise ValueError(f"grid of {n} entries exceeds dense-matrix cap {cap}")
        basis = np.eye(n).reshape((n,) + shape)
        cols = self.apply(basis).reshape(n, -1)
        return np.ascontiguousarray(cols.T)
