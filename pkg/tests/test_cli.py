import csv
import dataclasses
import json
import subprocess
import sys

import numpy as np
import pytest

from udavi.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, cmd_infer, parse_sweep, read_csv, run
from udavi.config import ConfigError, load_config
from udavi.training import load_checkpoint

TINY = {
    "task": "deblur",
    "operator": {"kernel_size": 3, "kernel_sigma": 1.0, "noise_sigma": 0.05},
    "schedule": {"T": 50},
    "data": {"kind": "textures", "count": 160, "height": 8, "width": 8, "channels": 1, "val_fraction": 0.125},
    "train": {
        "generator": "conv", "student": "conv", "widths": [2, 3, 4], "batch_size": 4, "learning_rate": 1e-3,
        "stage1_iters": 6, "stage2_iters": 4, "student_warmup": 2, "N": 3, "lam": 1.0,
    },
    "eval": {"seeds": 3, "curve_every": 2, "curve_seeds": 2},
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "tiny.json"
    path.write_text(json.dumps(TINY))
    assert run(["--config", str(path), "--out", str(root / "run"), "train"]) == EXIT_OK
    return root, path


def rows_of(path):
    return read_csv(path)[1]


def _summary(d):
    return json.loads((d / "summary.json").read_text())


def test_train_outputs(tiny):
    root, _ = tiny
    run_dir = root / "run"
    for name in ("stage1", "udavi", "davi_cont"):
        assert (run_dir / "checkpoints" / f"{name}.npz").exists()
    lines = (run_dir / "traces.ndjson").read_text().splitlines()
    head = json.loads(lines[0])
    assert head["header"] and len(head["config_hash"]) == 16
    arms = {json.loads(l)["arm"] for l in lines[1:]}
    assert arms == {"main", "control"}
    pgm = next((run_dir / "images").glob("*.pgm")).read_bytes()
    assert f"config_hash={head['config_hash']}".encode() in pgm


def test_train_rerun_identical(tiny, tmp_path):
    root, path = tiny
    assert run(["--config", str(path), "--out", str(tmp_path / "again"), "train"]) == EXIT_OK
    assert _summary(tmp_path / "again")["params_sha256"] == _summary(root / "run")["params_sha256"]


def test_lambda_zero_matches_control(tiny, tmp_path):
    _, path = tiny
    assert run(["--config", str(path), "--set", "train.lam=0", "--out", str(tmp_path), "train"]) == EXIT_OK
    hashes = _summary(tmp_path)["params_sha256"]
    assert hashes["udavi"] == hashes["davi_cont"]


def test_global_flags_after_verb(tiny, tmp_path):
    _, path = tiny
    assert run(["synth-data", "--config", str(path), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "measurements.npy").exists()


def test_infer_nfe_and_distinct_samples(tiny, tmp_path):
    root, path = tiny
    synth = tmp_path / "synth"
    assert run(["--config", str(path), "--out", str(synth), "synth-data"]) == EXIT_OK
    out = tmp_path / "infer"
    code = run([
        "--out", str(out), "infer", "--checkpoint", str(root / "run/checkpoints/udavi.npz"),
        "--measurements", str(synth / "measurements.npy"), "--samples", "100",
    ])
    assert code == EXIT_OK
    rows = rows_of(out / "nfe.csv")
    assert all(float(r["nfe"]) == 1.0 for r in rows)
    s = np.load(out / "samples.npy")
    assert s.shape[:2] == (20, 100)
    flat = s[0].reshape(100, -1)
    assert len({row.tobytes() for row in flat}) == 100


def test_infer_h_zero_identical(tiny, tmp_path):
    root, path = tiny
    cfg = load_config(path)
    cfg0 = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, h=0.0))
    y = tmp_path / "y.npy"
    np.save(y, np.zeros((2, 8, 8, 1)))
    cmd_infer(root / "run/checkpoints/udavi.npz", y, 5, tmp_path / "o", cfg0)
    s = np.load(tmp_path / "o/samples.npy")
    assert all(np.array_equal(s[m, 0], s[m, k]) for m in range(2) for k in range(5))


def test_infer_schedule_mismatch(tiny, tmp_path):
    root, path = tiny
    y = tmp_path / "y.npy"
    np.save(y, np.zeros((1, 8, 8, 1)))
    code = run([
        "--config", str(path), "--set", "schedule.T=60", "--out", str(tmp_path / "o"),
        "infer", "--checkpoint", str(root / "run/checkpoints/udavi.npz"), "--measurements", str(y),
    ])
    assert code == EXIT_CONFIG


def test_eval_outputs(tiny, tmp_path):
    root, _ = tiny
    assert run(["--out", str(tmp_path), "eval", "--run", str(root / "run")]) == EXIT_OK
    hist = rows_of(tmp_path / "hist_deblur.csv")
    assert len(hist) == 3
    pv = rows_of(tmp_path / "pvalues.csv")
    assert [(r["task"], r["metric"]) for r in pv] == [
        ("deblur", "psnr"), ("deblur", "frechet"), ("superres", "psnr"), ("superres", "frechet")
    ]
    assert {r["status"] for r in pv[2:]} == {"not_evaluated"}
    metrics = rows_of(tmp_path / "metrics.csv")
    for r in metrics:
        assert float(r["delta_psnr"]) == float(r["psnr_udavi"]) - float(r["psnr_davi"])
        assert float(r["delta_frechet"]) == float(r["frechet_davi"]) - float(r["frechet_udavi"])
    assert (tmp_path / "metrics.csv").read_text().startswith("# config_hash=")


def test_eval_identical_checkpoints_zero_variance(tiny, tmp_path):
    root, _ = tiny
    ck = root / "run/checkpoints/udavi.npz"
    assert run(["--out", str(tmp_path), "eval", "--davi", str(ck), "--udavi", str(ck)]) == EXIT_OK
    rows = rows_of(tmp_path / "metrics.csv")
    assert all(float(r["delta_psnr"]) == 0 and float(r["delta_frechet"]) == 0 for r in rows)
    assert {r["status"] for r in rows_of(tmp_path / "pvalues.csv")[:2]} == {"zero_variance"}


def test_eval_rejects_mixed_hash_and_few_seeds(tiny, tmp_path):
    root, path = tiny
    other = tmp_path / "other"
    assert run(["--config", str(path), "--set", "train.lam=0.5", "--out", str(other), "train"]) == EXIT_OK
    code = run([
        "--out", str(tmp_path / "e"), "eval",
        "--davi", str(root / "run/checkpoints/davi_cont.npz"), "--udavi", str(other / "checkpoints/udavi.npz"),
    ])
    assert code == EXIT_CONFIG
    assert run(["--out", str(tmp_path / "e2"), "eval", "--run", str(root / "run"), "--seeds", "1"]) == EXIT_CONFIG


def test_ablate_lambda_rows(tiny, tmp_path):
    _, path = tiny
    assert run(["--config", str(path), "--out", str(tmp_path), "ablate", "--sweep", "lambda=0.5,1.0,2.0"]) == EXIT_OK
    rows = rows_of(tmp_path / "sweep.csv")
    assert [float(r["value"]) for r in rows] == [0.5, 1.0, 2.0]
    assert _summary(tmp_path)["best_by_psnr"] in (0.5, 1.0, 2.0)


def test_ablate_n_curves(tiny, tmp_path):
    root, path = tiny
    code = run(["--config", str(path), "--out", str(tmp_path), "ablate", "--sweep", "N=2,4", "--from", str(root / "run")])
    assert code == EXIT_OK
    curves = rows_of(tmp_path / "curves.csv")
    for n in ("2", "4"):
        its = [int(r["iteration"]) for r in curves if r["value"] == n]
        assert its == [0, 2, 4]
    assert set(_summary(tmp_path)["peak_iteration_by_psnr"]) == {"2", "4"}


def test_single_value_sweep_matches_train_and_eval(tiny, tmp_path):
    root, path = tiny
    assert run(["--config", str(path), "--out", str(tmp_path / "a"), "ablate", "--sweep", "lambda=1.0"]) == EXIT_OK
    res = _summary(tmp_path / "a")["results"][0]
    assert res["params_sha256"] == _summary(root / "run")["params_sha256"]["udavi"]
    assert run(["--out", str(tmp_path / "e"), "eval", "--run", str(root / "run")]) == EXIT_OK
    ev = _summary(tmp_path / "e")["tasks"]["deblur"]
    assert res["psnr"] == ev["psnr"]["mean_udavi"]
    assert res["frechet"] == ev["frechet"]["mean_udavi"]


@pytest.mark.parametrize("sweep", ["lambda=", "gamma=1,2", "lambda", "N=a,b"])
def test_bad_sweeps(sweep):
    with pytest.raises(ConfigError):
        parse_sweep(sweep)


def test_ablate_from_run_hash_check(tiny, tmp_path):
    root, path = tiny
    code = run([
        "--config", str(path), "--set", "train.gamma=0.7", "--out", str(tmp_path),
        "ablate", "--sweep", "N=2", "--from", str(root / "run"),
    ])
    assert code == EXIT_CONFIG


def test_exit_codes(tmp_path, tiny):
    _, path = tiny
    assert run(["--config", str(tmp_path / "missing.json"), "train"]) == EXIT_CONFIG
    assert run(["--config", str(path), "--set", "train.bogus=1", "train"]) == EXIT_CONFIG
    assert run(["--out", str(tmp_path), "infer", "--checkpoint", str(tmp_path / "none.npz"), "--measurements", "x.npy"]) == EXIT_IO
    code = run(["--config", str(path), "--set", "train.learning_rate=1e6", "--set", "train.stage1_iters=50", "--out", str(tmp_path / "d"), "train"])
    assert code == EXIT_DIVERGENCE


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "udavi", "--config", str(tmp_path / "nope.json"), "train"], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "config error" in proc.stderr


def test_threads_env(tiny, tmp_path, monkeypatch):
    _, path = tiny
    monkeypatch.setenv("UDAVI_THREADS", "1")
    assert run(["--config", str(path), "--out", str(tmp_path), "synth-data"]) == EXIT_OK
    monkeypatch.setenv("UDAVI_THREADS", "zero")
    assert run(["--config", str(path), "--out", str(tmp_path), "synth-data"]) == EXIT_CONFIG
