"""Losses, the alternating student/generator update, and the two-stage curriculum."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bridge import sample_bridge, sample_bridge_uncertain
from .memory import MemoryBank
from .models import (
    AdamW,
    AffineGenerator,
    GaussianStudent,
    ConvGenerator,
    ConvStudent,
    GaussianPrior,
    ParamModel,
    build_model,
)
from .numerics import NonFiniteError, Stream, make_rng
from .operators import ForwardOperator
from .schedule import ScheduleTable

__all__ = [
    "TrainConfig",
    "TrainingData",
    "TrainState",
    "DivergenceError",
    "consistency_loss",
    "consistency_grad",
    "score_matching_loss",
    "ikl_generator_grad",
    "new_state",
    "train_step",
    "init_memories",
    "run_stage",
    "train_stage1",
    "continue_stage2",
    "run_two_stage",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
DAVI, U_DAVI = "DAVI", "U_DAVI"
CHECKPOINT_FORMAT = "udavi-checkpoint"
CHECKPOINT_VERSION = 1


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, trace: dict | None = None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.5
    lam: float = 1.0
    h: float = 0.1
    N: int = 8
    batch_size: int = 8
    stage2_batch_size: int | None = None
    learning_rate: float = 1e-4
    student_lr: float | None = None
    weight_decay: float = 0.0
    beta_a: tuple[float, float] = (3.0, 1.0)
    a_fixed: float | None = None
    stage1_iters: int = 1000
    stage2_iters: int = 300
    student_warmup: int = 0
    student_steps: int = 1
    use_ikl: bool = True
    generator: str = "conv"
    student: str = "conv"
    widths: tuple[int, int, int] = (8, 16, 32)
    seed: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.lam < 0 or self.h < 0:
            raise ValueError("lambda and h must be non-negative")
        if self.N < 1 or self.batch_size < 1 or (self.stage2_batch_size or 1) < 1:
            raise ValueError("N and batch sizes must be >= 1")
        if self.stage1_iters < 0 or self.stage2_iters < 0 or self.student_warmup < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.student_steps < 1:
            raise ValueError("student_steps must be >= 1")
        if len(self.beta_a) != 2 or min(self.beta_a) <= 0:
            raise ValueError("beta_a must be two positive shape parameters")
        if self.a_fixed is not None and not 0.0 <= self.a_fixed <= 1.0:
            raise ValueError("a_fixed must lie in [0, 1]")
        if self.generator not in ("affine", "conv"):
            raise ValueError("generator must be 'affine' or 'conv'")
        if self.student not in ("gaussian", "conv"):
            raise ValueError("student must be 'gaussian' or 'conv'")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TrainingData:
    """Training records with measurements; ``y_img`` is ``y`` on the image grid."""

    ids: np.ndarray
    x0: np.ndarray
    y: np.ndarray
    y_img: np.ndarray

    @classmethod
    def measure(cls, ids, x0, op: ForwardOperator, seed: int) -> TrainingData:
        ids = np.asarray(ids, dtype=np.int64)
        y = np.stack([op.measure(x0[k], make_rng(seed, Stream.MEASURE, int(i))) for k, i in enumerate(ids)])
        return cls(ids, np.asarray(x0, dtype=np.float64), y, op.lift(y))

    def __len__(self):
        return int(self.ids.size)


@dataclass
class TrainState:
    generator: ParamModel
    student: ParamModel
    gen_opt: AdamW
    student_opt: AdamW
    iteration: int = 0
    memory: MemoryBank | None = None

    def copy(self) -> TrainState:
        return TrainState(
            self.generator.copy(),
            self.student.copy(),
            copy.deepcopy(self.gen_opt),
            copy.deepcopy(self.student_opt),
            self.iteration,
            None if self.memory is None else self.memory.copy(),
        )


# ---------------------------------------------------------------- losses


def consistency_loss(op: ForwardOperator, y, xhat0) -> float:
    """Squared-error data consistency ``||y - H xhat0||^2``."""
    r = np.asarray(y) - op.apply(xhat0)
    return float(np.sum(r * r))


def consistency_grad(op: ForwardOperator, y, xhat0) -> np.ndarray:
    return 2.0 * op.adjoint(op.apply(xhat0) - np.asarray(y))


def score_matching_loss(student, xhat0, t, z, sched: ScheduleTable) -> float:
    """Denoising score matching ``||s(x_t, t) + z / sqrt(1 - ab_t)||^2`` for one sample."""
    x_t = sched.diffuse(xhat0, t, z)
    ab = float(sched.alpha_bar(t))
    target = -np.asarray(z) / np.sqrt(1.0 - ab)
    r = student.score(x_t, t, sched) - target
    return float(np.sum(r * r))


def ikl_generator_grad(gen, student, teacher: GaussianPrior, y_a, t, z, sched: ScheduleTable):
    """Generator-parameter gradient of the IKL term for a batch of bridge inputs.

    Uses ``w(t) (s_student - s_teacher)(x_t)`` as a fixed vector field and
    back-propagates it through ``x_t = sqrt(ab) G(y_a) + sqrt(1 - ab) z``.
    Returns ``(grad, delta_s)``; the gradient is summed over the batch.
    """
    xhat, cache = gen.forward_cached(y_a)
    x_t = sched.diffuse(xhat, t, z)
    delta = student.score(x_t, t, sched) - teacher.score(x_t, t, sched)
    if not np.all(np.isfinite(delta)):
        raise NonFiniteError("non-finite score difference")
    g = _field_to_xhat(delta, t, sched, xhat.ndim)
    grad, _ = gen.backward(cache, g)
    return grad, delta


def _field_to_xhat(delta, t, sched, ndim):
    w = sched.ikl_weight(t)
    ab = sched.alpha_bar(t)
    coef = np.asarray(w * np.sqrt(ab), dtype=np.float64)
    if coef.ndim:
        coef = coef.reshape(coef.shape + (1,) * (ndim - 1))
    return coef * delta


# ---------------------------------------------------------------- state


def new_state(cfg: TrainConfig, shape, sched: ScheduleTable, teacher: GaussianPrior) -> TrainState:
    if cfg.generator == "affine":
        gen = AffineGenerator.identity(shape)
    else:
        gen = ConvGenerator(shape, cfg.widths, seed=cfg.seed)
    if cfg.student == "gaussian":
        st = GaussianStudent.from_prior(shape, teacher)
    else:
        st = ConvStudent(shape, cfg.widths, seed=cfg.seed)
    return TrainState(
        gen,
        st,
        AdamW(gen.params.size, cfg.learning_rate, weight_decay=cfg.weight_decay),
        AdamW(st.params.size, cfg.student_lr or cfg.learning_rate, weight_decay=cfg.weight_decay),
    )


def batch_indices(step: int, batch: int, n: int, seed: int, stage: int) -> np.ndarray:
    """Rows for ``step``: consecutive slices of a stream of seeded epoch permutations."""
    start = step * batch
    out = []
    while len(out) < batch:
        epoch, pos = divmod(start + len(out), n)
        perm = make_rng(seed, Stream.BATCH, stage, epoch).permutation(n)
        take = min(batch - len(out), n - pos)
        out.extend(perm[pos : pos + take].tolist())
    return np.array(out, dtype=np.int64)


def _draws(cfg, sched, shape, seed, stream, stage, step, ids):
    a = np.empty(len(ids))
    t = np.empty(len(ids), dtype=np.int64)
    z = np.empty((len(ids),) + shape)
    eps = np.empty((len(ids),) + shape)
    extra = []
    for k, i in enumerate(ids):
        rng = make_rng(seed, stream, stage, step, int(i))
        a[k] = cfg.a_fixed if cfg.a_fixed is not None else rng.beta(*cfg.beta_a)
        z[k] = rng.standard_normal(shape)
        t[k] = rng.integers(1, sched.T + 1)
        eps[k] = rng.standard_normal(shape)
        extra.append([(rng.integers(1, sched.T + 1), rng.standard_normal(shape)) for _ in range(cfg.student_steps - 1)])
    more = []
    for j in range(cfg.student_steps - 1):
        more.append((np.array([e[j][0] for e in extra]), np.stack([e[j][1] for e in extra])))
    return a, z, t, eps, more


def _student_update(state, x_hat, t, eps, sched):
    x_t = sched.diffuse(x_hat, t, eps)
    st = state.student
    eps_hat, cache = st.forward_cached(x_t, t, sched)
    resid = eps_hat - eps
    b = resid.shape[0]
    per = np.sum(resid.reshape(b, -1) ** 2, axis=1)
    ab = sched.alpha_bar(t)
    grad, _ = st.backward(cache, 2.0 * resid / b)
    state.student_opt.step(st.params, grad)
    # eps-space loss drives the update; the score-space value is reported
    return float(per.mean()), float(np.mean(per / (1.0 - ab)))


@dataclass
class StepContext:
    op: ForwardOperator
    sched: ScheduleTable
    teacher: GaussianPrior
    data: TrainingData
    seed: int = 0


def train_step(state: TrainState, ctx: StepContext, cfg: TrainConfig, *, kind: str, stage: int, step: int, lam: float = 0.0, batch_size: int | None = None) -> dict:
    """One alternating update on one batch; returns the step trace.

    Order: bridge draw, generator pass, student update(s), generator update,
    then (U-DAVI only) uncertainty and memory update.
    """
    data, sched, op = ctx.data, ctx.sched, ctx.op
    B = batch_size or cfg.batch_size
    rows = batch_indices(step, B, len(data), ctx.seed, stage)
    ids = data.ids[rows]
    shape = data.x0.shape[1:]
    a, z, t, eps, more = _draws(cfg, sched, shape, ctx.seed, Stream.TRAIN, stage, step, ids)
    x0, y, y_img = data.x0[rows], data.y[rows], data.y_img[rows]

    if kind == U_DAVI:
        u_prev = state.memory.uncertainty_for(ids)
        draw = sample_bridge_uncertain(x0, y_img, a, cfg.h, z, u_prev, lam, sched)
    else:
        u_prev = None
        draw = sample_bridge(x0, y_img, a, cfg.h, z, sched)

    gen, st = state.generator, state.student
    gen_nfe0, st_nfe0 = gen.nfe, st.nfe
    x_hat, gcache = gen.forward_cached(draw.y_a)

    loss_s_eps, loss_s = _student_update(state, x_hat, t, eps, sched)
    for t_j, eps_j in more:
        _student_update(state, x_hat, t_j, eps_j, sched)

    resid = op.apply(x_hat) - y
    loss_c = float(np.mean(np.sum(resid.reshape(B, -1) ** 2, axis=1)))
    g = cfg.gamma * 2.0 * op.adjoint(resid)
    ikl = 0.0
    if cfg.use_ikl:
        x_t = sched.diffuse(x_hat, t, eps)
        delta = st.score(x_t, t, sched) - ctx.teacher.score(x_t, t, sched)
        if not np.all(np.isfinite(delta)):
            raise DivergenceError("non-finite score difference", {"iteration": state.iteration})
        g = g + _field_to_xhat(delta, t, sched, x_hat.ndim)
        w = sched.ikl_weight(t).reshape((B,) + (1,) * len(shape))
        ikl = float(np.mean(np.sum((w * delta * x_t).reshape(B, -1), axis=1)))
    grad, _ = gen.backward(gcache, g / B)

    trace = {
        "iteration": state.iteration,
        "stage": stage,
        "kind": kind,
        "step": step,
        "ids": ids.tolist(),
        "a": a.tolist(),
        "t": t.tolist(),
        "losses": {"consistency": loss_c, "score": loss_s, "score_eps": loss_s_eps, "ikl_surrogate": ikl},
        "nfe": {"generator": gen.nfe - gen_nfe0, "student": st.nfe - st_nfe0},
        "order": ["student", "generator"],
    }
    for name, v in trace["losses"].items():
        if not np.isfinite(v) or abs(v) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"{name} loss diverged ({v})", trace)
    try:
        state.gen_opt.step(gen.params, grad)
    except NonFiniteError as exc:
        raise DivergenceError(str(exc), trace) from exc

    if kind == U_DAVI:
        u_new = state.memory.observe(ids, x_hat, cfg.N)
        trace["order"].append("memory")
        trace["u_prev_max"] = float(u_prev.max())
        trace["u_mean"] = float(u_new.mean())
    state.iteration += 1
    return trace


def warmup_student(state: TrainState, ctx: StepContext, cfg: TrainConfig, iters: int) -> list[dict]:
    """Student-only updates on outputs of the initial generator."""
    traces = []
    shape = ctx.data.x0.shape[1:]
    for step in range(iters):
        rows = batch_indices(step, cfg.batch_size, len(ctx.data), ctx.seed, 0)
        ids = ctx.data.ids[rows]
        a, z, t, eps, _ = _draws(cfg, ctx.sched, shape, ctx.seed, Stream.WARMUP, 0, step, ids)
        draw = sample_bridge(ctx.data.x0[rows], ctx.data.y_img[rows], a, cfg.h, z, ctx.sched)
        x_hat = state.generator.forward(draw.y_a)
        _, loss_s = _student_update(state, x_hat, t, eps, ctx.sched)
        traces.append({"stage": 0, "kind": "warmup", "step": step, "losses": {"score": loss_s}})
    return traces


def init_memories(state: TrainState, ctx: StepContext, cfg: TrainConfig) -> MemoryBank:
    """Memories from the current (stage-1) generator's reconstructions, uncertainty zero."""
    if state is None or state.generator is None:
        raise ValueError("init_memories needs a trained stage-1 generator")
    data = ctx.data
    shape = data.x0.shape[1:]
    a, z, _, _, _ = _draws(
        TrainConfig(**{**cfg.__dict__, "student_steps": 1}), ctx.sched, shape, ctx.seed, Stream.MEMORY_INIT, 0, 0, data.ids
    )
    draw = sample_bridge(data.x0, data.y_img, a, cfg.h, z, ctx.sched)
    x_hat = state.generator.forward(draw.y_a)
    return MemoryBank.from_reconstructions(data.ids, x_hat)


def run_stage(state: TrainState, ctx: StepContext, cfg: TrainConfig, *, kind: str, stage: int, iters: int, lam: float = 0.0, batch_size: int | None = None, callback=None) -> list[dict]:
    if kind == DAVI:
        lam = 0.0
    traces = []
    for step in range(iters):
        tr = train_step(state, ctx, cfg, kind=kind, stage=stage, step=step, lam=lam, batch_size=batch_size)
        traces.append(tr)
        if callback is not None:
            callback(state, tr)
    return traces


@dataclass
class TwoStageResult:
    stage1: TrainState
    stage2: TrainState
    control: TrainState | None
    traces: list[dict] = field(default_factory=list)
    control_traces: list[dict] = field(default_factory=list)


def train_stage1(cfg: TrainConfig, ctx: StepContext, shape=None) -> tuple[TrainState, list[dict]]:
    """Student warm-up followed by DAVI pre-training (lambda forced to 0)."""
    if ctx.data is None or len(ctx.data) == 0:
        raise ValueError("training needs a non-empty dataset")
    shape = shape or ctx.data.x0.shape[1:]
    state = new_state(cfg, shape, ctx.sched, ctx.teacher)
    traces = warmup_student(state, ctx, cfg, cfg.student_warmup)
    traces += run_stage(state, ctx, cfg, kind=DAVI, stage=1, iters=cfg.stage1_iters)
    return state, traces


def continue_stage2(stage1: TrainState, ctx: StepContext, cfg: TrainConfig, *, kind: str = U_DAVI, callback=None) -> tuple[TrainState, list[dict]]:
    """Stage-2 run on a copy of ``stage1``; U-DAVI first initializes the memories."""
    state = stage1.copy()
    state.memory = init_memories(state, ctx, cfg) if kind == U_DAVI else None
    traces = run_stage(
        state, ctx, cfg, kind=kind, stage=2, iters=cfg.stage2_iters, lam=cfg.lam,
        batch_size=cfg.stage2_batch_size, callback=callback,
    )
    return state, traces


def run_two_stage(cfg: TrainConfig, ctx: StepContext, shape=None, *, control: bool = False, stage2_kind: str = U_DAVI) -> TwoStageResult:
    """DAVI pre-training, memory initialization, U-DAVI fine-tuning.

    With ``control=True`` a DAVI continuation over the same stage-2 random
    streams is run from the same stage-1 state.
    """
    stage1, traces = train_stage1(cfg, ctx, shape)
    ctl, ctl_traces = None, []
    if control:
        ctl, ctl_traces = continue_stage2(stage1, ctx, cfg, kind=DAVI)
    state, more = continue_stage2(stage1, ctx, cfg, kind=stage2_kind)
    return TwoStageResult(stage1.copy(), state, ctl, traces + more, ctl_traces)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: TrainState, sched: ScheduleTable, meta: dict | None = None) -> Path:
    """Write a checkpoint as an ``.npz`` container (layout documented in README)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "generator": state.generator.arch(),
        "student": state.student.arch(),
        "iteration": state.iteration,
        "has_memory": state.memory is not None,
        "meta": meta or {},
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        "generator": state.generator.params,
        "student": state.student.params,
        "schedule_betas": sched.betas,
    }
    for role, opt in (("gen_opt", state.gen_opt), ("student_opt", state.student_opt)):
        for k, v in opt.state_dict().items():
            arrays[f"{role}.{k}"] = v
    if state.memory is not None:
        arrays["memory.ids"] = state.memory.ids
        arrays["memory.values"] = state.memory.memory
        arrays["memory.uncertainty"] = state.memory.uncertainty
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[TrainState, ScheduleTable, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format in {path}")
        gen = build_model(header["generator"], z["generator"])
        st = build_model(header["student"], z["student"])
        opts = {
            role: AdamW.from_state({k: z[f"{role}.{k}"] for k in ("m", "v", "t", "hyper")})
            for role in ("gen_opt", "student_opt")
        }
        memory = None
        if header["has_memory"]:
            memory = MemoryBank(z["memory.ids"], z["memory.values"], z["memory.uncertainty"])
        sched = ScheduleTable(z["schedule_betas"])
    state = TrainState(gen, st, opts["gen_opt"], opts["student_opt"], header["iteration"], memory)
    return state, sched, header["meta"]
