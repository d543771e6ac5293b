"""Synthetic datasets with known (or fitted) Gaussian priors."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .models import GaussianPrior
from .numerics import Stream, cholesky, make_rng

__all__ = [
    "DatasetSpec",
    "Dataset",
    "make_prior",
    "synth_dataset",
    "train_val_split",
    "save_dataset",
    "load_dataset",
    "prior_hash",
]

log = logging.getLogger(__name__)

KINDS = ("gaussian", "gmm", "textures")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gaussian"
    count: int = 256
    height: int = 8
    width: int = 8
    channels: int = 1
    seed: int = 0
    prior_std: float = 0.25
    length_scale: float = 0.0
    nugget: float = 1e-4
    gmm_components: int = 2
    gmm_offset: float = 0.3
    fit_shrinkage: float = 1e-3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"dataset kind must be one of {KINDS}, got {self.kind!r}")
        if self.count < 1:
            raise ValueError("dataset count must be >= 1")
        if min(self.height, self.width, self.channels) < 1:
            raise ValueError("grid dimensions must be positive")
        if self.prior_std <= 0 or self.nugget < 0 or self.length_scale < 0:
            raise ValueError("prior_std must be positive; nugget and length_scale non-negative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)


@dataclass
class Dataset:
    ids: np.ndarray
    x0: np.ndarray
    prior: GaussianPrior
    clamp_rate: float = 0.0
    spec: DatasetSpec = field(default_factory=DatasetSpec)

    def __len__(self):
        return int(self.ids.size)

    def subset(self, ids) -> Dataset:
        pos = {int(i): k for k, i in enumerate(self.ids)}
        rows = np.array([pos[int(i)] for i in ids], dtype=np.int64)
        return Dataset(self.ids[rows], self.x0[rows], self.prior, self.clamp_rate, self.spec)


def _stationary_cov(spec: DatasetSpec) -> np.ndarray:
    h, w, c = spec.shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    if spec.length_scale > 0:
        k = np.exp(-d2 / (2.0 * spec.length_scale**2))
    else:
        k = np.eye(h * w)
    cov = spec.prior_std**2 * np.kron(k, np.eye(c))
    return cov + spec.nugget * np.eye(h * w * c)


def make_prior(spec: DatasetSpec) -> GaussianPrior:
    """Closed-form prior for the Gaussian and GMM dataset kinds."""
    d = spec.height * spec.width * spec.channels
    cov = _stationary_cov(spec)
    if spec.kind == "gaussian":
        return GaussianPrior(np.zeros(d), cov)
    if spec.kind == "gmm":
        k = spec.gmm_components
        offsets = np.linspace(-spec.gmm_offset, spec.gmm_offset, k) if k > 1 else np.zeros(1)
        return GaussianPrior(None, None, [(1.0 / k, np.full(d, o), cov) for o in offsets])
    raise ValueError("texture priors are fitted from data, see synth_dataset")


def _texture(rng: np.random.Generator, shape) -> np.ndarray:
    h, w, c = shape
    ii, jj = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    img = np.zeros((h, w))
    for amp in (0.3, 0.2):
        freq = rng.uniform(1.5, max(2.0, min(h, w) / 3.0))
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        img += amp * np.sin(2 * np.pi * freq * (np.cos(theta) * ii + np.sin(theta) * jj) + phase)
    # one straight step edge through a random point
    theta = rng.uniform(0, 2 * np.pi)
    px, py = rng.uniform(0.2, 0.8, size=2)
    side = (np.cos(theta) * (ii - px) + np.sin(theta) * (jj - py)) > 0
    img += np.where(side, 1.0, -1.0) * rng.uniform(0.15, 0.35)
    tint = rng.uniform(0.8, 1.0, size=c)
    return np.clip(img[:, :, None] * tint, -1.0, 1.0)


def fit_gaussian(x: np.ndarray, shrinkage: float) -> GaussianPrior:
    flat = x.reshape(x.shape[0], -1)
    mu = flat.mean(axis=0)
    cov = np.cov(flat, rowvar=False) if flat.shape[0] > 1 else np.zeros((flat.shape[1],) * 2)
    cov = np.atleast_2d(cov) + shrinkage * np.eye(flat.shape[1])
    return GaussianPrior(mu, cov)


def synth_dataset(spec: DatasetSpec) -> Dataset:
    """Draw ``spec.count`` clean images; each record has its own random stream."""
    ids = np.arange(spec.count, dtype=np.int64)
    shape = spec.shape
    d = int(np.prod(shape))
    x0 = np.empty((spec.count,) + shape)
    if spec.kind == "textures":
        for i in ids:
            x0[i] = _texture(make_rng(spec.seed, Stream.DATA, int(i)), shape)
        prior = fit_gaussian(x0, spec.fit_shrinkage)
        return Dataset(ids, x0, prior, 0.0, spec)

    prior = make_prior(spec)
    factors = [cholesky(c.cov) for c in prior.components]
    weights = np.array([c.weight for c in prior.components])
    for i in ids:
        rng = make_rng(spec.seed, Stream.DATA, int(i))
        k = int(rng.choice(len(weights), p=weights)) if len(weights) > 1 else 0
        comp = prior.components[k]
        x0[i] = (comp.mu + factors[k] @ rng.standard_normal(d)).reshape(shape)
    clamped = np.abs(x0) > 1.0
    rate = float(clamped.mean())
    np.clip(x0, -1.0, 1.0, out=x0)
    log.info("synthesized %d %s images, clamp rate %.2e", spec.count, spec.kind, rate)
    return Dataset(ids, x0, prior, rate, spec)


def train_val_split(ids, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    ids = np.asarray(ids, dtype=np.int64)
    n_val = int(round(ids.size * val_fraction))
    if n_val == 0 or n_val == ids.size:
        raise ValueError(f"split of {ids.size} records at {val_fraction} leaves an empty side")
    perm = make_rng(seed, Stream.SPLIT).permutation(ids.size)
    val = np.sort(ids[perm[:n_val]])
    train = np.sort(ids[perm[n_val:]])
    return train, val


def prior_hash(prior: GaussianPrior) -> str:
    h = hashlib.sha256()
    for comp in prior.components:
        h.update(np.float64(comp.weight).tobytes())
        h.update(np.ascontiguousarray(comp.mu).tobytes())
        h.update(np.ascontiguousarray(comp.cov).tobytes())
    return h.hexdigest()


def save_dataset(path, ds: Dataset) -> Path:
    """Directory of ``.npy`` arrays plus ``manifest.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "x0.npy", ds.x0)
    np.save(path / "ids.npy", ds.ids)
    for k, comp in enumerate(ds.prior.components):
        np.save(path / f"prior_mu_{k}.npy", comp.mu)
        np.save(path / f"prior_cov_{k}.npy", comp.cov)
    manifest = {
        "format": "udavi-dataset/1",
        "spec": asdict(ds.spec),
        "dims": list(ds.x0.shape[1:]),
        "count": len(ds),
        "seed": ds.spec.seed,
        "clamp_rate": ds.clamp_rate,
        "prior_weights": [c.weight for c in ds.prior.components],
        "prior_hash": prior_hash(ds.prior),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_file}")
    manifest = json.loads(manifest_file.read_text())
    weights = manifest["prior_weights"]
    comps = [
        (w, np.load(path / f"prior_mu_{k}.npy"), np.load(path / f"prior_cov_{k}.npy"))
        for k, w in enumerate(weights)
    ]
    prior = GaussianPrior(None, None, comps)
    if prior_hash(prior) != manifest["prior_hash"]:
        raise ValueError("prior arrays do not match the manifest hash")
    return Dataset(
        np.load(path / "ids.npy"),
        np.load(path / "x0.npy"),
        prior,
        manifest["clamp_rate"],
        DatasetSpec(**manifest["spec"]),
    )
