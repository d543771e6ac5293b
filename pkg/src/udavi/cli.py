"""Command-line harness: synth-data, train, infer, eval and ablate.

Every run writes into one output directory (see README for the layout). All
emitted files carry the config hash in their header, and every command is a
pure function of its config and seed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bridge import inference_input
from .config import PRESETS, ConfigError, ExperimentConfig, config_from_dict, load_config
from .data import Dataset, load_dataset, save_dataset, synth_dataset, train_val_split
from .evaluation import DegenerateDeltasError, frechet_desk, nfe_audit, paired_t_test, posterior_samples, psnr
from .numerics import Stream, make_rng
from .pnm import export_image, tile
from .training import (
    DAVI,
    U_DAVI,
    StepContext,
    TrainingData,
    TrainState,
    continue_stage2,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
)

log = logging.getLogger("udavi")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4
TASKS = ("deblur", "superres")
METRICS = ("psnr", "frechet")
HIST_BINS = 20


class CheckpointMismatchError(ConfigError):
    pass


# ---------------------------------------------------------------- shared plumbing


@dataclass
class Prepared:
    cfg: ExperimentConfig
    dataset: Dataset
    train: TrainingData
    val: TrainingData

    @property
    def op(self):
        return self.cfg.make_operator()

    @property
    def sched(self):
        return self.cfg.make_schedule()

    def context(self, sched=None) -> StepContext:
        return StepContext(self.op, sched or self.sched, self.dataset.prior, self.train, self.cfg.seed)


def prepare(cfg: ExperimentConfig, dataset: Dataset | None = None) -> Prepared:
    """Synthesize (or accept) the dataset, split it and measure both sides."""
    if dataset is None:
        dataset = synth_dataset(cfg.dataset_spec())
    elif dataset.spec != cfg.dataset_spec():
        raise ConfigError("dataset on disk was synthesized with a different data config")
    op = cfg.make_operator()
    if any(s % op.factor for s in dataset.x0.shape[1:3]):
        raise ConfigError(f"grid {dataset.x0.shape[1:3]} is not divisible by sr_factor {op.factor}")
    tr_ids, va_ids = train_val_split(dataset.ids, cfg.data.val_fraction, cfg.seed)
    if cfg.eval.holdout is not None:
        va_ids = va_ids[: cfg.eval.holdout]
    tr, va = dataset.subset(tr_ids), dataset.subset(va_ids)
    return Prepared(
        cfg,
        dataset,
        TrainingData.measure(tr.ids, tr.x0, op, cfg.seed),
        TrainingData.measure(va.ids, va.x0, op, cfg.seed),
    )


def params_hash(state_or_params) -> str:
    p = state_or_params.generator.params if isinstance(state_or_params, TrainState) else state_or_params
    return hashlib.sha256(np.ascontiguousarray(p, dtype=np.float64).tobytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header_comment: str, columns, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> tuple[str, list[dict]]:
    """Return the ``# ...`` header line and the rows of a harness CSV."""
    lines = Path(path).read_text().splitlines()
    comment = lines[0][2:] if lines and lines[0].startswith("# ") else ""
    body = lines[1:] if comment else lines
    return comment, list(csv.DictReader(body))


def _config_record(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "config": cfg.to_dict()}


def _ckpt_meta(cfg: ExperimentConfig, role: str) -> dict:
    return {"role": role, **_config_record(cfg)}


def _config_from_meta(meta: dict, where) -> ExperimentConfig:
    if "config" not in meta:
        raise ConfigError(f"{where}: checkpoint carries no config; pass --config")
    cfg = config_from_dict(meta["config"])
    if cfg.hash() != meta.get("config_hash"):
        raise CheckpointMismatchError(f"{where}: stored config does not match its hash")
    return cfg


# ---------------------------------------------------------------- synth-data


def cmd_synth_data(cfg: ExperimentConfig, out: Path) -> dict:
    prep = prepare(cfg)
    h = cfg.hash()
    save_dataset(out / "data", prep.dataset)
    np.save(out / "measurements.npy", prep.val.y)
    np.save(out / "measurement_ids.npy", prep.val.ids)
    np.save(out / "train_ids.npy", prep.train.ids)
    _write_json(out / "config.json", _config_record(cfg))
    export_image(tile(prep.dataset.x0[:16], 4), out / "images" / _image_name("data_samples", cfg), comment=f"config_hash={h}")
    summary = {
        "config_hash": h,
        "count": len(prep.dataset),
        "n_train": len(prep.train),
        "n_val": len(prep.val),
        "clamp_rate": prep.dataset.clamp_rate,
    }
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- train


def _image_name(stem: str, cfg: ExperimentConfig) -> str:
    return f"{stem}.{'pgm' if cfg.data.channels == 1 else 'ppm'}"


def _preview(out: Path, cfg: ExperimentConfig, prep: Prepared, states: dict[str, TrainState]) -> None:
    h = cfg.hash()
    n = min(16, len(prep.val))
    comment = f"config_hash={h}"
    export_image(tile(prep.val.x0[:n], 4), out / "images" / _image_name("truth", cfg), comment=comment)
    export_image(tile(prep.val.y_img[:n], 4), out / "images" / _image_name("measured", cfg), comment=comment)
    for role, st in states.items():
        rec = reconstruct(st.generator, prep, seed_index=0)
        export_image(tile(rec[:n], 4), out / "images" / _image_name(f"recon_{role}", cfg), comment=comment)


def cmd_train(cfg: ExperimentConfig, out: Path, data_dir: Path | None = None) -> dict:
    """Two-stage training; writes stage-1, U-DAVI and (optionally) DAVI-continuation checkpoints."""
    prep = prepare(cfg, load_dataset(data_dir) if data_dir else None)
    ctx = prep.context()
    h = cfg.hash()
    _write_json(out / "config.json", _config_record(cfg))

    stage1, traces = train_stage1(cfg.train, ctx)
    ckpt_dir = out / "checkpoints"
    states = {"stage1": stage1}
    arms = [("udavi", U_DAVI)] + ([("davi_cont", DAVI)] if cfg.control_run else [])
    arm_traces = {"main": traces}
    for role, kind in arms:
        st, tr = continue_stage2(stage1, ctx, cfg.train, kind=kind)
        states[role] = st
        key = "main" if role == "udavi" else "control"
        arm_traces[key] = arm_traces.get(key, []) + tr

    paths = {}
    for role, st in states.items():
        paths[role] = str(save_checkpoint(ckpt_dir / f"{role}.npz", st, ctx.sched, _ckpt_meta(cfg, role)))

    with open(out / "traces.ndjson", "w") as fh:
        fh.write(json.dumps({"config_hash": h, "header": True}) + "\n")
        for arm, trs in arm_traces.items():
            for tr in trs:
                fh.write(json.dumps({"arm": arm, **tr}, sort_keys=True) + "\n")

    _preview(out, cfg, prep, states)
    last = arm_traces["main"][-1]["losses"] if arm_traces["main"] else {}
    summary = {
        "config_hash": h,
        "checkpoints": {k: str(Path(v).relative_to(out)) for k, v in paths.items()},
        "params_sha256": {k: params_hash(v) for k, v in states.items()},
        "final_losses": last,
        "clamp_rate": prep.dataset.clamp_rate,
        "n_train": len(prep.train),
        "n_val": len(prep.val),
    }
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- inference / eval core


def reconstruct(generator, prep: Prepared, seed_index: int, h: float | None = None) -> np.ndarray:
    """One posterior sample per validation measurement for inference seed ``seed_index``."""
    h = prep.cfg.train.h if h is None else h
    inputs = np.stack(
        [
            inference_input(prep.val.y_img[k], h, make_rng(prep.cfg.seed, Stream.EVAL, int(seed_index), int(i)))
            for k, i in enumerate(prep.val.ids)
        ]
    )
    return generator.forward(inputs)


def seed_metrics(recon: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    p = float(np.mean([psnr(r, t) for r, t in zip(recon, truth)]))
    return p, frechet_desk(recon, truth)


def compare_models(gen_davi, gen_udavi, prep: Prepared, n_seeds: int) -> list[dict]:
    """Per-seed metrics of both models on shared inference noise.

    ``delta_psnr = U - D`` and ``delta_frechet = D - U`` so positive favours U-DAVI.
    """
    rows = []
    for s in range(n_seeds):
        pd, fd = seed_metrics(reconstruct(gen_davi, prep, s), prep.val.x0)
        pu, fu = seed_metrics(reconstruct(gen_udavi, prep, s), prep.val.x0)
        rows.append(
            {
                "seed": s,
                "psnr_davi": pd,
                "psnr_udavi": pu,
                "frechet_davi": fd,
                "frechet_udavi": fu,
                "delta_psnr": pu - pd,
                "delta_frechet": fd - fu,
            }
        )
    return rows


def t_test_summary(deltas) -> dict:
    d = np.asarray(deltas, dtype=np.float64)
    rec = {"n": int(d.size), "mean_delta": float(d.mean()), "std_delta": float(d.std(ddof=1))}
    try:
        t, p = paired_t_test(d)
        rec.update(t=t, p=p, status="ok")
    except DegenerateDeltasError:
        rec.update(t=float("nan"), p=float("nan"), status="zero_variance")
    return rec


# ---------------------------------------------------------------- infer


def cmd_infer(ckpt: Path, measurements: Path, samples: int, out: Path, cfg: ExperimentConfig | None = None) -> dict:
    state, sched, meta = load_checkpoint(ckpt)
    stored = _config_from_meta(meta, ckpt) if "config" in meta else None
    cfg = cfg or stored
    if cfg is None:
        raise ConfigError(f"{ckpt}: no config available; pass --config")
    if not np.array_equal(cfg.make_schedule().betas, sched.betas):
        raise CheckpointMismatchError(f"schedule in config does not match checkpoint {ckpt}")
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    y = np.load(measurements)
    op = cfg.make_operator()
    shape = state.generator.shape
    expect = op.output_shape(shape)
    if y.ndim == len(expect):
        y = y[None]
    if tuple(y.shape[1:]) != tuple(expect):
        raise ConfigError(f"measurements have shape {y.shape[1:]}, operator expects {tuple(expect)}")

    h = cfg.hash()
    all_samples = np.empty((y.shape[0], samples) + tuple(shape))
    rows = []
    for m in range(y.shape[0]):
        with nfe_audit(state.generator) as audit:
            all_samples[m] = posterior_samples(state.generator, op, y[m], cfg.train.h, cfg.seed, range(samples), key=m)
        rows.append([m, samples, audit.count, audit.count / samples])
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "samples.npy", all_samples)
    _write_csv(out / "nfe.csv", f"config_hash={h}", ["measurement", "samples", "generator_evals", "nfe"], rows)
    for m in range(min(y.shape[0], 4)):
        export_image(
            tile(all_samples[m, :16], 4), out / "images" / _image_name(f"samples_{m}", cfg), comment=f"config_hash={h}"
        )
    summary = {"config_hash": h, "measurements": int(y.shape[0]), "samples": samples, "nfe_per_sample": rows[0][3] if rows else 0}
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- eval


def _pair_from_run(run: Path) -> tuple[Path, Path]:
    ck = run / "checkpoints"
    davi = ck / "davi_cont.npz"
    if not davi.exists():
        davi = ck / "stage1.npz"
    return davi, ck / "udavi.npz"


def cmd_eval(pairs: list[tuple[Path, Path]], out: Path, seeds: int | None = None, cfg: ExperimentConfig | None = None) -> dict:
    """Paired evaluation of (DAVI, U-DAVI) checkpoints, one pair per task."""
    per_task = {}
    for davi_path, udavi_path in pairs:
        sd, _, md = load_checkpoint(davi_path)
        su, _, mu = load_checkpoint(udavi_path)
        hd, hu = md.get("config_hash"), mu.get("config_hash")
        if hd != hu:
            raise CheckpointMismatchError(f"config hashes differ: {davi_path} ({hd}) vs {udavi_path} ({hu})")
        c = _config_from_meta(md, davi_path) if "config" in md else cfg
        if c is None:
            raise ConfigError("checkpoints carry no config; pass --config")
        if cfg is not None and "config" in md and cfg.hash() != hd:
            raise CheckpointMismatchError(f"--config hash {cfg.hash()} differs from checkpoint hash {hd}")
        if c.task in per_task:
            raise ConfigError(f"two checkpoint pairs for task {c.task}")
        n = c.eval.seeds if seeds is None else seeds
        if n < 2:
            raise ConfigError("eval needs at least 2 seeds")
        per_task[c.task] = (c, sd, su, n)

    hashes = {t: v[0].hash() for t, v in per_task.items()}
    header = "config_hash=" + ";".join(f"{t}:{hashes[t]}" for t in sorted(hashes))
    metric_rows, pvalues, tasks = [], [], {}
    cols = ["seed", "psnr_davi", "psnr_udavi", "frechet_davi", "frechet_udavi", "delta_psnr", "delta_frechet"]
    for task in TASKS:
        if task not in per_task:
            continue
        c, sd, su, n = per_task[task]
        prep = prepare(c)
        rows = compare_models(sd.generator, su.generator, prep, n)
        metric_rows += [[task] + [r[k] for k in cols] for r in rows]
        _write_csv(
            out / f"hist_{task}.csv",
            f"config_hash={hashes[task]}",
            ["seed", "delta_psnr", "delta_frechet"],
            [[r["seed"], r["delta_psnr"], r["delta_frechet"]] for r in rows],
        )
        tasks[task] = {}
        for metric in METRICS:
            d = np.array([r[f"delta_{metric}"] for r in rows])
            counts, edges = np.histogram(d, bins=HIST_BINS)
            _write_csv(
                out / f"hist_bins_{task}_{metric}.csv",
                f"config_hash={hashes[task]}",
                ["bin_lo", "bin_hi", "count"],
                [[float(edges[k]), float(edges[k + 1]), int(counts[k])] for k in range(HIST_BINS)],
            )
            tasks[task][metric] = t_test_summary(d)
            tasks[task][metric]["mean_davi"] = float(np.mean([r[f"{metric}_davi"] for r in rows]))
            tasks[task][metric]["mean_udavi"] = float(np.mean([r[f"{metric}_udavi"] for r in rows]))

    for task in TASKS:
        for metric in METRICS:
            rec = tasks.get(task, {}).get(metric)
            if rec is None:
                pvalues.append([task, metric, 0, "", "", "", "not_evaluated"])
            else:
                pvalues.append([task, metric, rec["n"], rec["mean_delta"], rec["t"], rec["p"], rec["status"]])

    _write_csv(out / "metrics.csv", header, ["task"] + cols, metric_rows)
    _write_csv(out / "pvalues.csv", header, ["task", "metric", "n", "mean_delta", "t", "p", "status"], pvalues)
    summary = {
        "config_hash": hashes,
        "sign_convention": {"delta_psnr": "udavi - davi", "delta_frechet": "davi - udavi", "positive": "U-DAVI better"},
        "tasks": tasks,
    }
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------- ablate


SWEEP_KEYS = {"lambda": "lam", "lam": "lam", "N": "N"}


def parse_sweep(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise ConfigError("sweep must look like lambda=0.5,1.0,2.0 or N=4,8,16")
    key, vals = text.split("=", 1)
    key = key.strip()
    if key not in SWEEP_KEYS:
        raise ConfigError(f"cannot sweep {key!r}; choose lambda or N")
    field = SWEEP_KEYS[key]
    items = [v for v in vals.split(",") if v.strip()]
    if not items:
        raise ConfigError("sweep has no values")
    try:
        values = [int(v) if field == "N" else float(v) for v in items]
    except ValueError:
        raise ConfigError(f"bad sweep value list {vals!r}") from None
    return field, values


def cmd_ablate(cfg: ExperimentConfig, out: Path, field: str, values: list, from_run: Path | None = None) -> dict:
    """One stage-2 U-DAVI run per sweep value from a shared stage-1 checkpoint."""
    if not values:
        raise ConfigError("sweep has no values")
    prep = prepare(cfg)
    ctx = prep.context()
    h = cfg.hash()
    _write_json(out / "config.json", _config_record(cfg))
    if from_run is not None:
        stage1, sched, meta = load_checkpoint(from_run / "checkpoints" / "stage1.npz")
        if meta.get("config_hash") != h:
            raise CheckpointMismatchError(f"stage-1 checkpoint in {from_run} was trained with another config")
    else:
        stage1, _ = train_stage1(cfg.train, ctx)
        save_checkpoint(out / "checkpoints" / "stage1.npz", stage1, ctx.sched, _ckpt_meta(cfg, "stage1"))

    n_seeds = cfg.eval.seeds
    curve_seeds = min(cfg.eval.curve_seeds, n_seeds)
    sweep_rows, curve_rows, results = [], [], []
    for v in values:
        tcfg = dataclasses.replace(cfg.train, **{field: v})

        def on_step(state, tr, v=v):
            it = tr["step"] + 1
            if it % cfg.eval.curve_every == 0 or it == tcfg.stage2_iters:
                curve_rows.append([field, v, it] + list(_mean_metrics(state.generator, prep, curve_seeds)))

        curve_rows.append([field, v, 0] + list(_mean_metrics(stage1.generator, prep, curve_seeds)))
        state, _ = continue_stage2(stage1, ctx, tcfg, kind=U_DAVI, callback=on_step)
        tag = f"{field}_{v}"
        save_checkpoint(out / "checkpoints" / f"ablate_{tag}.npz", state, ctx.sched, _ckpt_meta(cfg, f"ablate_{tag}"))
        per_seed = [seed_metrics(reconstruct(state.generator, prep, s), prep.val.x0) for s in range(n_seeds)]
        ps, fs = np.array([p for p, _ in per_seed]), np.array([f for _, f in per_seed])
        row = [field, v, float(ps.mean()), float(ps.std()), float(fs.mean()), float(fs.std()), params_hash(state)]
        sweep_rows.append(row)
        results.append({"value": v, "psnr": row[2], "frechet": row[4], "params_sha256": row[6]})

    _write_csv(
        out / "sweep.csv", f"config_hash={h}",
        ["param", "value", "psnr_mean", "psnr_std", "frechet_mean", "frechet_std", "params_sha256"], sweep_rows,
    )
    _write_csv(out / "curves.csv", f"config_hash={h}", ["param", "value", "iteration", "psnr", "frechet"], curve_rows)
    peak = {}
    for v in values:
        pts = [r for r in curve_rows if r[1] == v]
        peak[str(v)] = int(max(pts, key=lambda r: r[3])[2])
    summary = {
        "config_hash": h,
        "param": field,
        "results": results,
        "best_by_psnr": max(results, key=lambda r: r["psnr"])["value"],
        "best_by_frechet": min(results, key=lambda r: r["frechet"])["value"],
        "peak_iteration_by_psnr": peak,
    }
    _write_json(out / "summary.json", summary)
    return summary


def _mean_metrics(generator, prep: Prepared, n_seeds: int) -> tuple[float, float]:
    vals = [seed_metrics(reconstruct(generator, prep, s), prep.val.x0) for s in range(n_seeds)]
    return float(np.mean([p for p, _ in vals])), float(np.mean([f for _, f in vals]))


# ---------------------------------------------------------------- entry point


def _threads():
    n = os.environ.get("UDAVI_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        count = int(n)
    except ValueError:
        count = 0
    if count < 1:
        raise ConfigError(f"UDAVI_THREADS must be a positive integer, got {n!r}")
    return threadpool_limits(count)


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags without defaults so either position works.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help=f"JSON config file or preset ({', '.join(PRESETS)})")
    common.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    common.add_argument("--out", type=Path, default=d(None), help="output directory")
    common.add_argument(
        "--set", action="append", default=d([]), metavar="KEY=VALUE", help="override a config field, e.g. train.lam=0"
    )
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags(suppress=True)
    p = argparse.ArgumentParser(prog="udavi", description=__doc__.splitlines()[0], parents=[_common_flags(suppress=False)])
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("synth-data", parents=[common], help="synthesize a dataset and validation measurements")
    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--data", type=Path, help="dataset directory written by synth-data")
    i = sub.add_parser("infer", parents=[common], help="posterior samples from a checkpoint")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--measurements", type=Path, required=True)
    i.add_argument("--samples", type=int, default=1)
    e = sub.add_parser("eval", parents=[common], help="paired DAVI vs U-DAVI evaluation")
    e.add_argument("--run", type=Path, action="append", default=[], help="training run directory (repeatable)")
    e.add_argument("--davi", type=Path, help="DAVI checkpoint")
    e.add_argument("--udavi", type=Path, help="U-DAVI checkpoint")
    e.add_argument("--seeds", type=int)
    a = sub.add_parser("ablate", parents=[common], help="stage-2 sweep over lambda or N")
    a.add_argument("--sweep", required=True, help="lambda=0.5,1.0,2.0 or N=4,8,16")
    a.add_argument("--from", dest="from_run", type=Path, help="reuse the stage-1 checkpoint of a run directory")
    return p


def _config(args, required: bool = True) -> ExperimentConfig | None:
    if args.config is None and not args.set and args.seed is None and not required:
        return None
    return load_config(args.config, args.set, args.seed)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = args.out or Path("runs") / args.verb
    try:
        with _threads():
            if args.verb == "synth-data":
                res = cmd_synth_data(_config(args), out)
            elif args.verb == "train":
                res = cmd_train(_config(args), out, args.data)
            elif args.verb == "infer":
                res = cmd_infer(args.checkpoint, args.measurements, args.samples, out, _config(args, required=False))
            elif args.verb == "eval":
                pairs = [_pair_from_run(r) for r in args.run]
                if args.davi or args.udavi:
                    if not (args.davi and args.udavi):
                        raise ConfigError("--davi and --udavi must be given together")
                    pairs.append((args.davi, args.udavi))
                if not pairs:
                    raise ConfigError("eval needs --run or --davi/--udavi")
                res = cmd_eval(pairs, out, args.seeds, _config(args, required=False))
            else:
                field, values = parse_sweep(args.sweep)
                res = cmd_ablate(_config(args), out, field, values, args.from_run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(run())
