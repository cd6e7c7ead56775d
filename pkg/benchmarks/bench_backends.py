"""Compare the numba kernels with their numpy twins.

Two parts:

* kernel timings, importing both implementations side by side, on inputs
  shaped like the published model (68 landmarks, 5 trees of depth 5,
  a 10880-column decoder matrix);
* end-to-end ``predict`` per face, run in a subprocess per backend with
  ``TCSC_BACKEND`` set, since the backend is fixed at import time.

Usage::

    python3 benchmarks/bench_backends.py [--repeat 5] [--faces 100] [--csv out.csv]
"""
import argparse
import csv
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from tcsc.ensemble import PixelTable, random_forest
from tcsc.kernels import _numba, _numpy

L, N, D = 68, 5, 5

FACE_SCRIPT = r"""
import json, sys, time
import numpy as np
from tcsc import kernels
from tcsc.cascade import CascadeModel, Stage, predict
from tcsc.decoders import ReducedRankDecoder
from tcsc.ensemble import random_forest
from tcsc.geometry import FaceBox

faces, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
stages = []
for r in (16, 24, 32, 40, 48):
    f = random_forest(68, 5, 5, 0.3, rng)
    stages.append(Stage(f, ReducedRankDecoder(rng.normal(scale=0.01, size=(r, f.dim)),
                                              rng.normal(scale=0.01, size=(136, r)))))
model = CascadeModel(rng.uniform(0.2, 0.8, (68, 2)), stages)
image = rng.integers(0, 256, (480, 640)).astype(np.uint8)
boxes = [FaceBox(*rng.uniform(100, 200, 2), *rng.uniform(150, 250, 2)) for _ in range(faces)]
predict(model, image, boxes[0], 1)
best = {}
for p in (1, 7):
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        for b in boxes:
            predict(model, image, b, p)
        runs.append((time.perf_counter() - t0) / faces * 1e3)
    best[p] = min(runs)
print(json.dumps({"backend": kernels.BACKEND, "ms": best}))
"""


def kernel_inputs(rng):
    images = [rng.integers(0, 256, (480, 640)).astype(np.uint8) for _ in range(4)]
    table = PixelTable(images)
    n = 512
    img = rng.integers(0, len(images), n).astype(np.int64)
    boxes = np.column_stack([rng.uniform(100, 200, (n, 2)), rng.uniform(150, 250, (n, 2))])
    shapes = rng.uniform(0.1, 0.9, (n, L, 2))
    forest = random_forest(L, N, D, 0.3, rng)
    tree_lm, offsets, thr = forest._kernel_arrays
    cand = rng.uniform(-0.3, 0.3, (128, 4))
    W = rng.normal(size=(48, forest.dim)).astype(np.float32)
    cb = np.sort(rng.normal(size=(48, 16)).astype(np.float32), axis=1)
    ind = rng.integers(0, 16, W.shape).astype(np.uint8)
    descend = (*table.args(), img, boxes, shapes, tree_lm, offsets, thr, D)
    active = _numba.descend_forest(*descend).astype(np.int64) + np.arange(forest.n_trees) * (1 << D)
    grads = rng.normal(size=(n, 48))
    return {
        "pixel_diffs (128 candidates x 512 samples)":
            lambda k: k.pixel_diffs(*table.args(), img, boxes, np.ascontiguousarray(shapes[:, 0]),
                                    np.arange(n), cand),
        "descend_forest (340 trees x 512 samples)": lambda k: k.descend_forest(*descend),
        "gather_sum (48 x 10880, 512 samples)": lambda k: k.gather_sum(W, active),
        "gather_sum_codebook (q=4)": lambda k: k.gather_sum_codebook(cb, ind, active),
        "scatter_add (sgd update)": lambda k: k.scatter_add(np.zeros((48, forest.dim)), active, grads, -0.01),
    }


def time_kernels(repeat):
    rows = []
    cases = kernel_inputs(np.random.default_rng(1))
    for name, fn in cases.items():
        fn(_numba)   # compile
        t_nb = min(timeit.repeat(lambda: fn(_numba), number=1, repeat=repeat))
        t_np = min(timeit.repeat(lambda: fn(_numpy), number=1, repeat=repeat))
        rows.append({"case": name, "numba_ms": t_nb * 1e3, "numpy_ms": t_np * 1e3,
                     "speedup": t_np / t_nb})
    return rows


def time_faces(backend, faces, repeat):
    env = dict(os.environ, TCSC_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", FACE_SCRIPT, str(faces), str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--faces", type=int, default=100)
    ap.add_argument("--csv", help="also write the rows as CSV")
    args = ap.parse_args(argv)

    rows = time_kernels(args.repeat)
    faces = {b: time_faces(b, args.faces, args.repeat)["ms"] for b in ("numba", "numpy")}
    for p in ("1", "7"):
        nb, npy = faces["numba"][p], faces["numpy"][p]
        rows.append({"case": f"predict per face, RRR, p={p}", "numba_ms": nb, "numpy_ms": npy,
                     "speedup": npy / nb})

    width = max(len(r["case"]) for r in rows)
    print(f"{'case':<{width}}  {'numba ms':>10}  {'numpy ms':>10}  {'speedup':>8}")
    for r in rows:
        print(f"{r['case']:<{width}}  {r['numba_ms']:>10.3f}  {r['numpy_ms']:>10.3f}  {r['speedup']:>7.1f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
