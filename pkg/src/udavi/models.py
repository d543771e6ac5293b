"""Generators, student score networks, the analytic teacher, and the optimizer.

Every network keeps its weights in one flat float64 vector and implements its
own reverse pass; ``forward_cached`` / ``backward`` are the gradient contract.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import NonFiniteError, Stream, cholesky, make_rng
from .schedule import ScheduleTable

__all__ = [
    "ParamLayout",
    "AffineGenerator",
    "ConvGenerator",
    "GaussianStudent",
    "ConvStudent",
    "GaussianPrior",
    "AdamW",
    "param_grad",
    "build_model",
]


class ParamLayout:
    """Named slices of a flat parameter vector."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.shapes = dict(shapes)
        self.offsets = {}
        n = 0
        for name, shape in self.shapes.items():
            self.offsets[name] = n
            n += int(np.prod(shape))
        self.size = n

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        o = self.offsets[name]
        shape = self.shapes[name]
        return flat[o : o + int(np.prod(shape))].reshape(shape)

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {k: self.view(flat, k) for k in self.shapes}


def _check_finite(x: np.ndarray, layer: int | str):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite activation at layer {layer}")


def _flatten(x: np.ndarray, shape) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(shape):
        return x.reshape(1, -1), True
    if x.shape[1:] == tuple(shape):
        return x.reshape(x.shape[0], -1), False
    raise ValueError(f"input shape {x.shape} does not match model grid {tuple(shape)}")


class ParamModel:
    """Base: architecture descriptor plus flat parameters."""

    kind = "base"

    def __init__(self, layout: ParamLayout, params: np.ndarray | None = None):
        self.layout = layout
        if params is None:
            params = np.zeros(layout.size)
        params = np.array(params, dtype=np.float64).reshape(-1)
        if params.size != layout.size:
            raise ValueError(f"expected {layout.size} parameters, got {params.size}")
        self.params = params
        self.nfe = 0

    def arch(self) -> dict:
        raise NotImplementedError

    def copy(self):
        other = build_model(self.arch(), self.params.copy())
        return other


# ---------------------------------------------------------------- generators


class AffineGenerator(ParamModel):
    """``xhat = clip(A y_a + b, -1, 1)`` on vectorized grids.

    The clip is the identity inside the model range, so the map is exactly
    affine wherever the output is not saturated.
    """

    kind = "affine_generator"

    def __init__(self, shape, params=None):
        self.shape = tuple(int(s) for s in shape)
        d = int(np.prod(self.shape))
        super().__init__(ParamLayout({"A": (d, d), "b": (d,)}), params)

    @classmethod
    def identity(cls, shape) -> AffineGenerator:
        g = cls(shape)
        g.layout.view(g.params, "A")[...] = np.eye(g.layout.shapes["A"][0])
        return g

    def arch(self):
        return {"kind": self.kind, "shape": list(self.shape)}

    def forward_cached(self, y_a):
        x, single = _flatten(y_a, self.shape)
        A = self.layout.view(self.params, "A")
        b = self.layout.view(self.params, "b")
        v = x @ A.T + b
        _check_finite(v, 0)
        out = np.clip(v, -1.0, 1.0)
        self.nfe += x.shape[0]
        shape = self.shape if single else (x.shape[0],) + self.shape
        return out.reshape(shape), (x, v, single)

    def forward(self, y_a):
        return self.forward_cached(y_a)[0]

    def backward(self, cache, g_out):
        x, v, single = cache
        g = np.asarray(g_out, dtype=np.float64).reshape(v.shape)
        gv = g * ((v > -1.0) & (v < 1.0))
        A = self.layout.view(self.params, "A")
        grad = np.empty(self.layout.size)
        self.layout.view(grad, "A")[...] = gv.T @ x
        self.layout.view(grad, "b")[...] = gv.sum(axis=0)
        gx = gv @ A
        gx = gx.reshape(self.shape if single else (x.shape[0],) + self.shape)
        return grad, gx


def _silu(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return x * s, s


def _silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


def _conv_forward(x, w, b):
    # x: (B, H, W, Cin), w: (3, 3, Cin, Cout); zero padding keeps H, W
    bsz, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, Cin, 3, 3)
    cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * h * wd, 9 * cin)
    out = cols @ w.reshape(9 * cin, -1) + b
    return out.reshape(bsz, h, wd, -1), cols


def _conv_backward(g, cols, w, xshape):
    bsz, h, wd, cin = xshape
    cout = w.shape[-1]
    g2 = g.reshape(-1, cout)
    gw = (cols.T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(9 * cin, cout).T).reshape(bsz, h, wd, 3, 3, cin)
    gxp = np.zeros((bsz, h + 2, wd + 2, cin))
    for i in range(3):
        for j in range(3):
            gxp[:, i : i + h, j : j + wd] += gcols[:, :, :, i, j]
    return gw, gb, gxp[:, 1:-1, 1:-1]


def _pool(x):
    b, h, w, c = x.shape
    return x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _pool_grad(g):
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0


def _up(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _up_grad(g):
    b, h, w, c = g.shape
    return g.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


class _UNet:
    """Three-level conv encoder-decoder with additive skips and SiLU activations.

    enc1 -> pool -> enc2 -> pool -> mid -> up -> dec2 (+enc2) -> up -> dec1 (+enc1) -> out
    """

    names = ("enc1", "enc2", "mid", "dec2", "dec1", "out")

    def __init__(self, cin: int, cout: int, widths=(8, 16, 32)):
        c1, c2, c3 = (int(c) for c in widths)
        self.widths = (c1, c2, c3)
        self.io = {
            "enc1": (cin, c1),
            "enc2": (c1, c2),
            "mid": (c2, c3),
            "dec2": (c3, c2),
            "dec1": (c2, c1),
            "out": (c1, cout),
        }

    def shapes(self):
        s = {}
        for n in self.names:
            ci, co = self.io[n]
            s[n + ".w"] = (3, 3, ci, co)
            s[n + ".b"] = (co,)
        return s

    def init(self, layout, params, rng, zero_out=True):
        for n in self.names:
            ci, _ = self.io[n]
            w = layout.view(params, n + ".w")
            if n == "out" and zero_out:
                w[...] = 0.0
            else:
                w[...] = rng.standard_normal(w.shape) * math.sqrt(2.0 / (9 * ci))
            layout.view(params, n + ".b")[...] = 0.0

    def forward(self, p, x):
        c = {}

        def conv(name, inp, layer):
            out, cols = _conv_forward(inp, p[name + ".w"], p[name + ".b"])
            _check_finite(out, layer)
            c[name] = (cols, inp.shape)
            return out

        a1 = conv("enc1", x, 0)
        e1, s1 = _silu(a1)
        a2 = conv("enc2", _pool(e1), 1)
        e2, s2 = _silu(a2)
        a3 = conv("mid", _pool(e2), 2)
        m, s3 = _silu(a3)
        a4 = conv("dec2", _up(m), 3)
        h4, s4 = _silu(a4)
        d2 = h4 + e2
        a5 = conv("dec1", _up(d2), 4)
        h5, s5 = _silu(a5)
        d1 = h5 + e1
        o = conv("out", d1, 5)
        c["act"] = ((a1, s1), (a2, s2), (a3, s3), (a4, s4), (a5, s5))
        return o, c

    def backward(self, p, c, g_o, grads):
        (a1, s1), (a2, s2), (a3, s3), (a4, s4), (a5, s5) = c["act"]

        def conv_b(name, g):
            cols, xshape = c[name]
            gw, gb, gx = _conv_backward(g, cols, p[name + ".w"], xshape)
            grads[name + ".w"][...] = gw
            grads[name + ".b"][...] = gb
            return gx

        g_d1 = conv_b("out", g_o)
        g_e1 = g_d1.copy()
        g_d2 = _up_grad(conv_b("dec1", g_d1 * _silu_grad(a5, s5)))
        g_e2 = g_d2.copy()
        g_m = _up_grad(conv_b("dec2", g_d2 * _silu_grad(a4, s4)))
        g_e2 += _pool_grad(conv_b("mid", g_m * _silu_grad(a3, s3)))
        g_e1 += _pool_grad(conv_b("enc2", g_e2 * _silu_grad(a2, s2)))
        return conv_b("enc1", g_e1 * _silu_grad(a1, s1))


def _batch_image(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(shape):
        return x[None], True
    if x.shape[1:] == tuple(shape):
        return x, False
    raise ValueError(f"input shape {x.shape} does not match model grid {tuple(shape)}")


class ConvGenerator(ParamModel):
    """``xhat = tanh(y_a + unet(y_a))``; the zero-initialized output conv makes it start as ``tanh(y_a)``."""

    kind = "conv_generator"

    def __init__(self, shape, widths=(8, 16, 32), params=None, seed: int | None = 0):
        self.shape = tuple(int(s) for s in shape)
        h, w, c = self.shape
        if h % 4 or w % 4:
            raise ValueError("conv models need grid sides divisible by 4")
        self.net = _UNet(c, c, widths)
        super().__init__(ParamLayout(self.net.shapes()), params)
        if params is None and seed is not None:
            self.net.init(self.layout, self.params, make_rng(seed, Stream.INIT, 1))

    def arch(self):
        return {"kind": self.kind, "shape": list(self.shape), "widths": list(self.net.widths)}

    def forward_cached(self, y_a):
        x, single = _batch_image(y_a, self.shape)
        o, c = self.net.forward(self.layout.views(self.params), x)
        out = np.tanh(x + o)
        _check_finite(out, 6)
        self.nfe += x.shape[0]
        return (out[0] if single else out), (c, out, single)

    def forward(self, y_a):
        return self.forward_cached(y_a)[0]

    def backward(self, cache, g_out):
        c, out, single = cache
        g = np.asarray(g_out, dtype=np.float64).reshape(out.shape)
        g_pre = g * (1.0 - out**2)
        grad = np.empty(self.layout.size)
        gx = self.net.backward(self.layout.views(self.params), c, g_pre, self.layout.views(grad))
        gx = gx + g_pre
        return grad, (gx[0] if single else gx)


# ---------------------------------------------------------------- students


class _Student(ParamModel):
    def _t_batch(self, t, n, sched: ScheduleTable):
        t = np.broadcast_to(np.asarray(t), (n,))
        return t, sched.alpha_bar(t)

    def forward(self, x_t, t, sched):
        return self.forward_cached(x_t, t, sched)[0]

    predict_eps = forward

    def score(self, x_t, t, sched):
        """Score estimate ``-eps_hat / sqrt(1 - alpha_bar_t)``."""
        eps, cache = self.forward_cached(x_t, t, sched)
        return -eps / _expand(np.sqrt(1.0 - cache["ab"]), np.ndim(eps), cache["single"])


def _expand(v, ndim, single):
    if single:
        return v.reshape(())
    return v.reshape(v.shape + (1,) * (ndim - 1))


class GaussianStudent(_Student):
    """Score model of a learnable Gaussian ``N(m, L L^T + floor I)``.

    The score of every diffused marginal is exact for Gaussian data, so this
    is the student matching an analytic Gaussian teacher. It reports the
    noise prediction ``eps_hat = -sqrt(1 - ab_t) * score``.
    """

    kind = "gaussian_student"

    def __init__(self, shape, params=None, floor: float = 1e-6):
        self.shape = tuple(int(s) for s in shape)
        self.floor = float(floor)
        d = int(np.prod(self.shape))
        super().__init__(ParamLayout({"m": (d,), "L": (d, d)}), params)

    @classmethod
    def from_prior(cls, shape, prior: GaussianPrior) -> GaussianStudent:
        """Student initialized to the (first component of the) teacher."""
        st = cls(shape)
        st.layout.view(st.params, "m")[...] = prior.mu0
        st.layout.view(st.params, "L")[...] = cholesky(prior.Sigma0 - st.floor * np.eye(prior.dim))
        return st

    def arch(self):
        return {"kind": self.kind, "shape": list(self.shape), "floor": self.floor}

    def covariance(self) -> np.ndarray:
        L = self.layout.view(self.params, "L")
        return L @ L.T + self.floor * np.eye(L.shape[0])

    def forward_cached(self, x_t, t, sched):
        x, single = _flatten(x_t, self.shape)
        t, ab = self._t_batch(t, x.shape[0], sched)
        m = self.layout.view(self.params, "m")
        lam, Q = np.linalg.eigh(self.covariance())
        diag = ab[:, None] * lam + (1.0 - ab)[:, None]
        r = x - np.sqrt(ab)[:, None] * m
        score = -((r @ Q) / diag) @ Q.T
        scale = np.sqrt(1.0 - ab)[:, None]
        eps = -scale * score
        _check_finite(eps, 0)
        self.nfe += x.shape[0]
        shape = self.shape if single else (x.shape[0],) + self.shape
        cache = {"score": score, "Q": Q, "diag": diag, "ab": ab, "scale": scale, "single": single}
        return eps.reshape(shape), cache

    def backward(self, cache, g_out):
        score, Q, diag, ab, scale = cache["score"], cache["Q"], cache["diag"], cache["ab"], cache["scale"]
        gs = -scale * np.asarray(g_out, dtype=np.float64).reshape(score.shape)  # d loss / d score
        u = ((gs @ Q) / diag) @ Q.T  # M^-1 g per sample
        G = -(ab[:, None] * u).T @ score
        G = 0.5 * (G + G.T)
        L = self.layout.view(self.params, "L")
        grad = np.empty(self.layout.size)
        self.layout.view(grad, "m")[...] = np.sum(np.sqrt(ab)[:, None] * u, axis=0)
        self.layout.view(grad, "L")[...] = 2.0 * G @ L
        shape = self.shape if cache["single"] else (score.shape[0],) + self.shape
        return grad, (-u).reshape(shape)


class ConvStudent(_Student):
    """U-Net noise predictor; ``t / T`` enters as an extra constant input channel."""

    kind = "conv_student"

    def __init__(self, shape, widths=(8, 16, 32), params=None, seed: int | None = 0):
        self.shape = tuple(int(s) for s in shape)
        h, w, c = self.shape
        if h % 4 or w % 4:
            raise ValueError("conv models need grid sides divisible by 4")
        self.net = _UNet(c + 1, c, widths)
        super().__init__(ParamLayout(self.net.shapes()), params)
        if params is None and seed is not None:
            self.net.init(self.layout, self.params, make_rng(seed, Stream.INIT, 2))

    def arch(self):
        return {"kind": self.kind, "shape": list(self.shape), "widths": list(self.net.widths)}

    def forward_cached(self, x_t, t, sched):
        x, single = _batch_image(x_t, self.shape)
        t, ab = self._t_batch(t, x.shape[0], sched)
        tau = np.broadcast_to((t / sched.T)[:, None, None, None], x.shape[:3] + (1,))
        inp = np.concatenate([x, tau], axis=-1)
        eps, c = self.net.forward(self.layout.views(self.params), inp)
        self.nfe += x.shape[0]
        cache = {"net": c, "ab": ab, "single": single, "n": x.shape[-1]}
        return (eps[0] if single else eps), cache

    def backward(self, cache, g_out):
        g = np.asarray(g_out, dtype=np.float64)
        if cache["single"]:
            g = g[None]
        grad = np.empty(self.layout.size)
        gin = self.net.backward(self.layout.views(self.params), cache["net"], g, self.layout.views(grad))
        gx = gin[..., : cache["n"]]
        return grad, (gx[0] if cache["single"] else gx)


# ---------------------------------------------------------------- teacher


@dataclass
class _Component:
    weight: float
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cholesky(self.cov)  # SPD check
        self.evals, self.evecs = np.linalg.eigh(self.cov)
        if np.any(self.evals <= 0):
            raise np.linalg.LinAlgError("covariance has non-positive eigenvalues")


class GaussianPrior:
    """Gaussian (or Gaussian-mixture) prior over vectorized images.

    Stands in for a pretrained diffusion model: the score of every diffused
    marginal is available in closed form.
    """

    def __init__(self, mu, cov, mixture: list[tuple[float, np.ndarray, np.ndarray]] | None = None):
        if mixture is None:
            mixture = [(1.0, mu, cov)]
        weights = np.array([w for w, _, _ in mixture], dtype=np.float64)
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        self.components = [
            _Component(float(w), np.asarray(m, dtype=np.float64).reshape(-1), np.asarray(c, dtype=np.float64))
            for w, m, c in mixture
        ]
        d = self.components[0].mu.size
        for comp in self.components:
            if comp.mu.size != d or comp.cov.shape != (d, d):
                raise ValueError("inconsistent component dimensions")
        self.dim = d

    @property
    def mu0(self) -> np.ndarray:
        return self.components[0].mu

    @property
    def Sigma0(self) -> np.ndarray:
        return self.components[0].cov

    def _terms(self, x, ab):
        # per component: score and log-density of N(sqrt(ab) mu, ab Sigma + (1 - ab) I)
        d = self.dim
        out = []
        for comp in self.components:
            diff = x - np.sqrt(ab)[:, None] * comp.mu
            lam = ab[:, None] * comp.evals + (1.0 - ab)[:, None]
            if np.any(lam <= 0):
                raise np.linalg.LinAlgError("diffused covariance is not positive definite")
            proj = diff @ comp.evecs
            score = -(proj / lam) @ comp.evecs.T
            logp = (
                math.log(comp.weight)
                - 0.5 * np.sum(proj**2 / lam, axis=1)
                - 0.5 * np.sum(np.log(lam), axis=1)
                - 0.5 * d * math.log(2.0 * math.pi)
            )
            out.append((score, logp))
        return out

    def _prep(self, x_t, t, sched):
        x = np.asarray(x_t, dtype=np.float64)
        lead = x.shape[: x.ndim - 3] if x.ndim >= 3 else ()
        flat = x.reshape(-1, self.dim)
        t = np.broadcast_to(np.asarray(t), (flat.shape[0],))
        return x.shape, flat, sched.alpha_bar(t), lead

    def score(self, x_t, t, sched: ScheduleTable) -> np.ndarray:
        shape, flat, ab, _ = self._prep(x_t, t, sched)
        terms = self._terms(flat, ab)
        if len(terms) == 1:
            return terms[0][0].reshape(shape)
        logp = np.stack([lp for _, lp in terms], axis=1)
        r = np.exp(logp - logp.max(axis=1, keepdims=True))
        r /= r.sum(axis=1, keepdims=True)
        s = sum(r[:, k : k + 1] * terms[k][0] for k in range(len(terms)))
        return s.reshape(shape)

    def log_marginal(self, x_t, t, sched: ScheduleTable) -> np.ndarray:
        shape, flat, ab, _ = self._prep(x_t, t, sched)
        logp = np.stack([lp for _, lp in self._terms(flat, ab)], axis=1)
        m = logp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(logp - m).sum(axis=1, keepdims=True)))[:, 0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        weights = np.array([c.weight for c in self.components])
        which = rng.choice(len(self.components), size=n, p=weights) if len(weights) > 1 else np.zeros(n, int)
        out = np.empty((n, self.dim))
        for k, comp in enumerate(self.components):
            idx = np.flatnonzero(which == k)
            if idx.size:
                L = cholesky(comp.cov)
                out[idx] = comp.mu + rng.standard_normal((idx.size, self.dim)) @ L.T
        return out


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay, updating a flat parameter vector in place."""

    def __init__(self, size: int, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray):
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("non-finite gradient passed to optimizer")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        if self.weight_decay:
            params *= 1.0 - self.lr * self.weight_decay
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "m": self.m.copy(),
            "v": self.v.copy(),
            "t": np.array(self.t),
            "hyper": np.array([self.lr, self.beta1, self.beta2, self.eps, self.weight_decay]),
        }

    @classmethod
    def from_state(cls, state: dict) -> AdamW:
        lr, b1, b2, eps, wd = (float(v) for v in state["hyper"])
        opt = cls(state["m"].size, lr, (b1, b2), eps, wd)
        opt.m = np.array(state["m"], dtype=np.float64)
        opt.v = np.array(state["v"], dtype=np.float64)
        opt.t = int(state["t"])
        return opt


# ---------------------------------------------------------------- helpers


def param_grad(model: ParamModel, loss_and_grad, x, *args):
    """Gradient of ``loss(model(x))`` w.r.t. the flat parameters.

    ``loss_and_grad(out)`` returns ``(loss, dloss/dout)``.
    """
    out, cache = model.forward_cached(x, *args)
    loss, g = loss_and_grad(out)
    grad, _ = model.backward(cache, g)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite parameter gradient")
    return grad


def build_model(arch: dict, params: np.ndarray | None = None) -> ParamModel:
    kind = arch["kind"]
    shape = tuple(arch["shape"])
    if kind == AffineGenerator.kind:
        return AffineGenerator(shape, params)
    if kind == ConvGenerator.kind:
        return ConvGenerator(shape, tuple(arch["widths"]), params, seed=None if params is not None else 0)
    if kind == GaussianStudent.kind:
        return GaussianStudent(shape, params, arch["floor"])
    if kind == ConvStudent.kind:
        return ConvStudent(shape, tuple(arch["widths"]), params, seed=None if params is not None else 0)
    raise ValueError(f"unknown architecture {kind!r}")
