"""Posterior oracle, reconstruction metrics, NFE accounting and significance tests."""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .bridge import inference_input
from .models import GaussianPrior, ParamModel
from .numerics import Stream, cholesky_solve, make_rng
from .operators import ForwardOperator

__all__ = [
    "PosteriorOracle",
    "gaussian_posterior",
    "psnr",
    "PSNR_CAP",
    "desk_features",
    "frechet_from_moments",
    "frechet_features",
    "frechet_desk",
    "student_t_sf",
    "regularized_incomplete_beta",
    "paired_t_test",
    "DegenerateDeltasError",
    "nfe_audit",
    "posterior_samples",
]

PSNR_CAP = 99.0
PEAK = 2.0  # model space [-1, 1]


@dataclass(frozen=True)
class PosteriorOracle:
    mu_post: np.ndarray
    Sigma_post: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.Sigma_post), 0.0, None))


def gaussian_posterior(prior: GaussianPrior, H: np.ndarray, sigma_y: float, y) -> PosteriorOracle:
    """Exact posterior of ``x ~ N(mu0, Sigma0)`` given ``y = H x + N(0, sigma_y^2 I)``."""
    if len(prior.components) != 1:
        raise ValueError("the closed-form oracle needs a single-component prior")
    mu0, S0 = prior.mu0, prior.Sigma0
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (y.size, mu0.size):
        raise ValueError(f"H has shape {H.shape}, expected {(y.size, mu0.size)}")
    SHt = S0 @ H.T
    innov = H @ SHt + sigma_y**2 * np.eye(y.size)
    gain_t = cholesky_solve(innov, SHt.T)  # (HS0H' + s^2 I)^-1 H S0
    mu = mu0 + gain_t.T @ (y - H @ mu0)
    cov = S0 - SHt @ gain_t
    return PosteriorOracle(mu, 0.5 * (cov + cov.T))


def psnr(x, ref) -> float:
    """PSNR in dB for model-space images (peak-to-peak 2); identical inputs give ``PSNR_CAP``."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(PEAK**2 / mse))


_SOBEL = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def desk_features(images) -> np.ndarray:
    """Handcrafted features per image: mean, 4x4 thumbnail, mean Sobel energy.

    Channels are averaged first, so every image maps to 18 numbers.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    g = x.mean(axis=-1)
    n, h, w = g.shape
    if h % 4 or w % 4:
        raise ValueError("desk features need grid sides divisible by 4")
    thumb = g.reshape(n, 4, h // 4, 4, w // 4).mean(axis=(2, 4)).reshape(n, 16)
    gp = np.pad(g, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = np.zeros_like(g)
    gy = np.zeros_like(g)
    for i in range(3):
        for j in range(3):
            win = gp[:, i : i + h, j : j + w]
            gx += _SOBEL[i, j] * win
            gy += _SOBEL.T[i, j] * win
    energy = np.mean(gx**2 + gy**2, axis=(1, 2))
    return np.column_stack([g.mean(axis=(1, 2)), thumb, energy])


def _sqrtm_psd(c: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (c + c.T))
    tol = -1e-10 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if np.any(vals < tol):
        raise np.linalg.LinAlgError(f"matrix is not positive semidefinite (eigenvalue {vals.min():.3e})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2))`` via symmetric eigendecompositions."""
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    ra = _sqrtm_psd(cov_a)
    inner = ra @ cov_b @ ra
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tol = -1e-10 * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if np.any(vals < tol):
        raise np.linalg.LinAlgError(f"product is not positive semidefinite (eigenvalue {vals.min():.3e})")
    tr_sqrt = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def frechet_features(fa, fb) -> float:
    fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
    if fa.ndim == 1:
        fa, fb = fa[:, None], fb[:, None]
    dim = fa.shape[1]
    for f in (fa, fb):
        if f.shape[0] <= dim:
            raise ValueError(
                f"{f.shape[0]} samples for {dim} features: use more images or fewer features"
            )
    return frechet_from_moments(fa.mean(0), np.cov(fa, rowvar=False), fb.mean(0), np.cov(fb, rowvar=False))


def frechet_desk(set_a, set_b) -> float:
    """Frechet distance between Gaussians fitted to desk features of two image sets."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("both image sets must be non-empty")
    return frechet_features(desk_features(set_a), desk_features(set_b))


# ---------------------------------------------------------------- t-test


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lnfront = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lnfront) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lnfront) * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


class DegenerateDeltasError(ValueError):
    pass


def paired_t_test(deltas) -> tuple[float, float]:
    """Two-sided one-sample t-test of per-seed differences against zero mean."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1)
    n = d.size
    if n < 2:
        raise ValueError("need at least two deltas")
    mean = float(d.mean())
    var = float(np.sum((d - mean) ** 2) / (n - 1))
    if var <= 1e-300:
        raise DegenerateDeltasError("deltas have zero variance; the t statistic is undefined")
    t = mean / math.sqrt(var / n)
    return t, student_t_sf(t, n - 1)


# ---------------------------------------------------------------- inference


@contextmanager
def nfe_audit(generator: ParamModel):
    """Counts generator evaluations (one per image) inside the block.

    >>> with nfe_audit(gen) as audit: ...
    >>> audit.count
    """

    class _Audit:
        count = 0

    audit = _Audit()
    start = generator.nfe
    try:
        yield audit
    finally:
        audit.count = generator.nfe - start


def posterior_samples(generator: ParamModel, op: ForwardOperator, y, h: float, seed: int, sample_seeds, key: int = 0) -> np.ndarray:
    """Single-pass samples ``G(lift(y) + h z)``, one per seed; shape ``(len(seeds), H, W, C)``."""
    y_img = op.lift(y)
    inputs = np.stack(
        [inference_input(y_img, h, make_rng(seed, Stream.INFER, int(s), int(key))) for s in sample_seeds]
    )
    return generator.forward(inputs)
