import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from modelgen import random_model
from tcsc import modelio
from tcsc.cascade import CascadeModel, Stage
from tcsc.cli import EXIT_DATA, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, bench_rows, main
from tcsc.config import RunConfig, load_config
from tcsc.datasets import DatasetMeta, Sample, load_dataset, load_landmarks, save_dataset
from tcsc.decoders import LinearDecoder
from tcsc.ensemble import random_forest
from tcsc.errors import ConfigError
from tcsc.geometry import FaceBox
from tcsc.quantizer import payload_nbytes

TRAIN_CFG = """\
# tiny cascade for the CLI tests
n_trees = 2
depth = 3
stages = 3
augment = 4
n_candidates = 24
decoder = rrr
r_schedule = 4, 6, 8
max_rotation = 10   # degrees
seed = 5
"""


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "train"), "--count", "120", "--landmarks", "6",
                 "--size", "64", "--seed", "1"]) == EXIT_OK
    assert main(["synth", "--out", str(root / "test"), "--count", "40", "--landmarks", "6",
                 "--size", "64", "--seed", "2"]) == EXIT_OK
    (root / "train.cfg").write_text(TRAIN_CFG)
    assert main(["train", "--config", str(root / "train.cfg"), "--data", str(root / "train"),
                 "--out", str(root / "m.tcsc")]) == EXIT_OK
    return root


# -- configuration -----------------------------------------------------------

def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.n_trees, cfg.depth, cfg.stages, cfg.augment) == (5, 5, 5, 20)
    assert cfg.r_schedule == (16, 24, 32, 40, 48)


def test_config_file_and_overrides(tmp_path):
    (tmp_path / "a.cfg").write_text(TRAIN_CFG)
    cfg = load_config(tmp_path / "a.cfg", ["depth=4", "ridge = 0.5", "iod=0,3"])
    assert cfg.n_trees == 2 and cfg.depth == 4 and cfg.r_schedule == (4, 6, 8)
    assert cfg.max_rotation == 10.0 and cfg.ridge == 0.5 and cfg.iod == (0, 3)


@pytest.mark.parametrize("text", ["depth 3\n", "depth = three\n", "colour = red\n", "decoder = svm\n",
                                  "quantize = 9\n"])
def test_config_errors(tmp_path, text):
    (tmp_path / "bad.cfg").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.cfg")


# -- train -------------------------------------------------------------------

def test_train_report(workspace):
    rep = json.loads((workspace / "m.tcsc.json").read_text())
    err = rep["stage_error"]
    assert len(err) == 4 and all(b <= a + 1e-9 for a, b in zip(err, err[1:]))
    assert rep["config"]["seed"] == 5 and rep["config"]["r_schedule"] == [4, 6, 8]
    assert rep["model_bytes"] == (workspace / "m.tcsc").stat().st_size
    assert rep["wall_seconds"] > 0 and rep["backend"] in ("numba", "numpy")


def test_train_is_deterministic(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "train.cfg"), "--data", str(workspace / "train"),
                 "--out", str(tmp_path / "again.tcsc")]) == EXIT_OK
    assert (tmp_path / "again.tcsc").read_bytes() == (workspace / "m.tcsc").read_bytes()


def test_train_usage_errors(workspace, tmp_path):
    base = ["train", "--config", str(workspace / "train.cfg"), "--out", str(tmp_path / "x.tcsc")]
    assert main(base + ["--data", str(tmp_path / "missing")]) == EXIT_USAGE
    assert main(base + ["--data", str(workspace / "train"), "--set", "nonsense=1"]) == EXIT_USAGE
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == EXIT_USAGE


def test_train_data_error(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "x.tcsc")]) == EXIT_DATA


def test_train_runtime_error(workspace, tmp_path):
    # a bottleneck wider than the output fails inside training, not in the config
    rc = main(["train", "--config", str(workspace / "train.cfg"), "--data", str(workspace / "train"),
               "--set", "r_schedule=4,6,40", "--out", str(tmp_path / "x.tcsc")])
    assert rc in (EXIT_DATA, EXIT_RUNTIME) and rc != EXIT_OK


# -- eval --------------------------------------------------------------------

def test_eval_csv(workspace, tmp_path):
    out = tmp_path / "e.csv"
    assert main(["eval", str(workspace / "m.tcsc"), "--data", str(workspace / "test"),
                 "--p", "1,7,15", "--out", str(out), "--series", str(tmp_path / "s.csv")]) == EXIT_OK
    rows = read_csv(out)
    assert list(rows[0]) == ["subset", "p", "mean_err", "median_err", "n"]
    assert [int(r["p"]) for r in rows] == [1, 7, 15]
    assert all(r["subset"] == "all" and int(r["n"]) == 40 for r in rows)
    series = read_csv(tmp_path / "s.csv")
    assert list(series[0]) == ["subset", "p", "storage_kib", "mean_err"]
    assert float(series[0]["storage_kib"]) == pytest.approx((workspace / "m.tcsc").stat().st_size / 1024)


def test_eval_subsets(workspace, tmp_path):
    stems = sorted(s.source for s in load_dataset(workspace / "test"))
    (tmp_path / "a.txt").write_text("\n".join(stems[:12]))
    (tmp_path / "b.txt").write_text("\n".join(stems[12:]))
    out = tmp_path / "e.csv"
    assert main(["eval", str(workspace / "m.tcsc"), "--data", str(workspace / "test"), "--p", "1",
                 "--subset", f"common={tmp_path / 'a.txt'}", "--subset", f"challenging={tmp_path / 'b.txt'}",
                 "--out", str(out)]) == EXIT_OK
    rows = {r["subset"]: r for r in read_csv(out)}
    assert {k: int(v["n"]) for k, v in rows.items()} == {"common": 12, "challenging": 28, "full": 40}
    full = (12 * float(rows["common"]["mean_err"]) + 28 * float(rows["challenging"]["mean_err"])) / 40
    assert float(rows["full"]["mean_err"]) == pytest.approx(full, rel=1e-9)


def test_eval_multi_init_not_worse(workspace, tmp_path):
    out = tmp_path / "e.csv"
    main(["eval", str(workspace / "m.tcsc"), "--data", str(workspace / "test"), "--p", "1,7", "--out", str(out)])
    e1, e7 = (float(r["mean_err"]) for r in read_csv(out))
    assert e7 <= e1 + 0.05


def test_eval_identity_stub_is_zero(tmp_path, rng):
    # every sample's box-frame shape equals the mean shape and all decoders are zero
    L = 4
    mean = rng.uniform(0.2, 0.8, (L, 2))
    samples = []
    for i in range(5):
        box = FaceBox(*rng.uniform(2, 6, 2), *rng.uniform(20, 30, 2))
        pts = np.column_stack([box.x + mean[:, 0] * box.w, box.y + mean[:, 1] * box.h])
        samples.append(Sample(rng.integers(0, 256, (40, 40)).astype(np.uint8), box, pts, f"s{i}"))
    save_dataset(samples, tmp_path / "d", DatasetMeta(iod=(0, 1)))
    f = random_forest(L, 1, 2, 0.2, rng)
    model = CascadeModel(mean, [Stage(f, LinearDecoder(np.zeros((2 * L, f.dim))))], (0, 1))
    modelio.save(model, tmp_path / "id.tcsc")
    out = tmp_path / "e.csv"
    assert main(["eval", str(tmp_path / "id.tcsc"), "--data", str(tmp_path / "d"), "--p", "1,7",
                 "--out", str(out)]) == EXIT_OK
    # float32 storage of the mean shape is the only error source
    assert all(float(r["mean_err"]) < 1e-4 for r in read_csv(out))


def test_eval_landmark_mismatch(workspace, tmp_path):
    main(["synth", "--out", str(tmp_path / "d"), "--count", "3", "--landmarks", "8", "--size", "48"])
    assert main(["eval", str(workspace / "m.tcsc"), "--data", str(tmp_path / "d")]) == EXIT_DATA


def test_eval_bad_model_file(workspace, tmp_path):
    (tmp_path / "junk.tcsc").write_bytes(b"garbage!" * 10)
    assert main(["eval", str(tmp_path / "junk.tcsc"), "--data", str(workspace / "test")]) == EXIT_DATA


# -- quantize ------------------------------------------------------------------

@pytest.mark.parametrize("q", [2, 4, 8])
def test_quantize_report(workspace, tmp_path, q):
    out, rep_path = tmp_path / f"q{q}.tcsc", tmp_path / f"q{q}.json"
    assert main(["quantize", str(workspace / "m.tcsc"), "--q", str(q), "--out", str(out),
                 "--report", str(rep_path)]) == EXIT_OK
    rep = json.loads(rep_path.read_text())
    assert rep["q"] == q and rep["file_bytes"] == out.stat().st_size
    model = modelio.load(out)
    expect = sum(math.ceil(s.decoder.first.rows * s.decoder.first.cols * q / 8) for s in model.stages)
    assert rep["totals"]["quantized_payload"] == expect
    assert expect == sum(payload_nbytes(r, model.stages[0].forest.dim, q) for r in (4, 6, 8))


@pytest.mark.parametrize("kind", ["rrr", "rrrbp", "nn"])
def test_quantize_shrinks_factored_models(tmp_path, kind, rng):
    # realistic widths: L=10, five depth-5 trees per landmark gives 1600 columns
    modelio.save(random_model(kind, rng, L=10, n=5, d=5, r_schedule=(4, 8)), tmp_path / "m.tcsc")
    for q in range(2, 9):
        rep_path = tmp_path / f"{q}.json"
        assert main(["quantize", str(tmp_path / "m.tcsc"), "--q", str(q), "--out", str(tmp_path / f"{q}.tcsc"),
                     "--report", str(rep_path)]) == EXIT_OK
        rep = json.loads(rep_path.read_text())
        assert rep["total"] < rep["unquantized_file_bytes"]
        assert rep["file_bytes"] < rep["unquantized_file_bytes"]


def test_quantize_q8_keeps_error(workspace, tmp_path):
    assert main(["quantize", str(workspace / "m.tcsc"), "--q", "8", "--out", str(tmp_path / "q8.tcsc"),
                 "--report", str(tmp_path / "r.json")]) == EXIT_OK
    errs = []
    for name in (workspace / "m.tcsc", tmp_path / "q8.tcsc"):
        out = tmp_path / "e.csv"
        main(["eval", str(name), "--data", str(workspace / "test"), "--p", "1", "--out", str(out)])
        errs.append(float(read_csv(out)[0]["mean_err"]))
    assert abs(errs[1] - errs[0]) <= 0.01 * errs[0]


def test_quantize_errors(workspace, tmp_path):
    m = str(workspace / "m.tcsc")
    assert main(["quantize", m, "--q", "9", "--out", str(tmp_path / "x.tcsc")]) == EXIT_USAGE
    assert main(["quantize", m, "--q", "1", "--out", str(tmp_path / "x.tcsc")]) == EXIT_USAGE
    main(["quantize", m, "--q", "4", "--out", str(tmp_path / "q.tcsc"), "--report", str(tmp_path / "r.json")])
    assert main(["quantize", str(tmp_path / "q.tcsc"), "--q", "4", "--out", str(tmp_path / "qq.tcsc")]) == EXIT_DATA


# -- bench -------------------------------------------------------------------

def test_bench_csv(workspace, tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", str(workspace / "m.tcsc"), "--data", str(workspace / "test"), "--p", "1,3",
                 "--threads", "1,2", "--repetitions", "2", "--out", str(out)]) == EXIT_OK
    rows = read_csv(out)
    assert list(rows[0]) == ["decoder", "p", "threads", "ms_mean", "ms_std"]
    assert len(rows) == 4 and {(r["p"], r["threads"]) for r in rows} == {("1", "1"), ("1", "2"),
                                                                        ("3", "1"), ("3", "2")}
    assert all(r["decoder"] == "rrr" and float(r["ms_mean"]) > 0 for r in rows)


def test_bench_single_repetition_has_zero_std(workspace):
    model = modelio.load(workspace / "m.tcsc")
    rows = bench_rows(model, load_dataset(workspace / "test")[:5], [1], [1], repetitions=1)
    assert rows[0]["ms_std"] == 0.0


def test_bench_scaling_envelope(workspace):
    model = modelio.load(workspace / "m.tcsc")
    samples = load_dataset(workspace / "test")
    rows = bench_rows(model, samples, [1, 15], [1], repetitions=5, warmup=2)
    ms1, ms15 = rows[0]["ms_mean"], rows[1]["ms_mean"]
    assert ms15 <= 15 * ms1 * 1.2


def test_bench_bad_repetitions(workspace):
    assert main(["bench", str(workspace / "m.tcsc"), "--data", str(workspace / "test"),
                 "--repetitions", "0"]) == EXIT_USAGE


# -- synth and predict -------------------------------------------------------

def test_synth_then_load(workspace):
    samples = load_dataset(workspace / "train")
    assert len(samples) == 120 and all(s.shape.shape == (6, 2) for s in samples)


def test_predict_dataset_twice_identical(workspace, tmp_path):
    for d in ("a", "b"):
        assert main(["predict", str(workspace / "m.tcsc"), "--data", str(workspace / "test"),
                     "--out-dir", str(tmp_path / d), "--p", "5", "--seed", "3"]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 40
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert load_landmarks(tmp_path / "a" / name).shape == (6, 2)


def test_predict_single_image(workspace, tmp_path):
    s = load_dataset(workspace / "test")[0]
    img = workspace / "test" / f"{s.source}.pgm"
    box = ",".join(str(v) for v in s.box.as_array())
    args = ["predict", str(workspace / "m.tcsc"), "--image", str(img), "--box", box, "--p", "3"]
    assert main(args + ["--out", str(tmp_path / "a.pts")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b.pts")]) == EXIT_OK
    assert (tmp_path / "a.pts").read_bytes() == (tmp_path / "b.pts").read_bytes()
    pts = load_landmarks(tmp_path / "a.pts")
    assert pts.shape == (6, 2)
    # predictions land near the face, in pixels
    assert np.all(np.abs(pts - s.shape) < s.box.w)


def test_predict_usage(workspace):
    assert main(["predict", str(workspace / "m.tcsc")]) == EXIT_USAGE
    assert main(["predict", str(workspace / "m.tcsc"), "--image", "x.pgm"]) == EXIT_USAGE


# -- inspect and process exit codes -------------------------------------------

def test_inspect_json(workspace, capsys):
    assert main(["inspect", str(workspace / "m.tcsc"), "--json"]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["decoder"] == "rrr" and info["r_schedule"] == [4, 6, 8] and info["q"] == "none"


def test_inspect_missing_file(tmp_path):
    assert main(["inspect", str(tmp_path / "none.tcsc")]) == EXIT_USAGE


def test_console_entry_point_exit_codes(tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "tcsc.cli", *a], capture_output=True, text=True)
    assert run("--help").returncode == 0
    assert run("frobnicate").returncode == 2
    proc = run("inspect", str(tmp_path / "none.tcsc"))
    assert proc.returncode == 2 and "error" in proc.stderr.lower()
