"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 runtime or numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels, modelio
from .cascade import CascadeModel, Stage, evaluate, predict, predict_batch, train_cascade
from .config import RunConfig, load_config
from .datasets import (DatasetMeta, SyntheticSpec, generate_synthetic, load_dataset, read_image,
                       read_index, read_meta, save_dataset, save_landmarks, validate_meta)
from .errors import ConfigError, DataError, ModelFormatError, NumericsError, TcscError
from .geometry import IOD_68, MIRROR_68, FaceBox, box_to_image
from .quantizer import memory_report, quantize_decoder

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("tcsc")


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        values = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _box(text):
    try:
        x, y, w, h = (float(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError("box must be 'x,y,w,h'") from None
    return FaceBox(x, y, w, h)


def _require_dir(path, what="dataset"):
    if path is None:
        raise UsageError(f"no {what} path given")
    if not Path(path).is_dir():
        raise UsageError(f"{what} path {path} does not exist")
    return Path(path)


def _conventions(cfg_iod, cfg_mirror, meta: DatasetMeta, n_landmarks):
    iod = cfg_iod or meta.iod or (IOD_68 if n_landmarks == 68 else None)
    mirror = cfg_mirror or meta.mirror_map or (MIRROR_68 if n_landmarks == 68 else None)
    if iod is None:
        raise DataError(f"no IOD landmark pair known for {n_landmarks} landmarks; set 'iod'")
    validate_meta(DatasetMeta(tuple(iod), mirror), n_landmarks)
    return tuple(iod), mirror


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    if path is None or str(path) == "-":
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _load_model(path) -> CascadeModel:
    if not Path(path).is_file():
        raise UsageError(f"model file {path} does not exist")
    return modelio.load(path)


def _quantized(model: CascadeModel, q, seed):
    rng = np.random.default_rng(seed)
    stages = [Stage(s.forest, quantize_decoder(s.decoder, q, rng)) for s in model.stages]
    return CascadeModel(model.mean_shape, stages, model.iod, model.mirror_map)


# -- commands ----------------------------------------------------------------

def cmd_train(args):
    cfg: RunConfig = load_config(args.config, args.set)
    if args.data:
        cfg.data = args.data
    if args.out:
        cfg.out = args.out
    root = _require_dir(cfg.data)
    stems = read_index(cfg.index) if cfg.index else None
    samples = load_dataset(root, stems, cfg.box_margin)
    L = len(samples[0].shape)
    iod, mirror = _conventions(cfg.iod, cfg.mirror_map, read_meta(root), L)
    tcfg = cfg.train_config()
    if mirror is None and tcfg.flip_prob > 0:
        log.warning("no mirror map for %d landmarks; flips disabled", L)
        tcfg.flip_prob = 0.0
    t0 = time.perf_counter()
    model, report = train_cascade(samples, tcfg, iod=iod, mirror_map=mirror)
    if cfg.quantize:
        model = _quantized(model, cfg.quantize, cfg.seed)
    nbytes = modelio.save(model, cfg.out)
    out = {
        "config": cfg.as_dict(), "backend": kernels.BACKEND, "model": cfg.out,
        "model_bytes": nbytes, "wall_seconds": time.perf_counter() - t0,
        "memory": memory_report(model).as_dict(), **report.as_dict(),
    }
    _write_json(cfg.report or f"{cfg.out}.json", out)
    print(f"wrote {cfg.out} ({nbytes} bytes); train error per stage: "
          + ", ".join(f"{e:.3f}" for e in report.stage_error))
    return EXIT_OK


def _subsets(args, samples):
    if not args.subset:
        return [("all", samples)]
    by_stem = {s.source: s for s in samples}
    out = []
    union = {}
    for spec in args.subset:
        if "=" not in spec:
            raise UsageError(f"subset {spec!r} must be name=index_file")
        name, path = spec.split("=", 1)
        stems = read_index(path)
        missing = [s for s in stems if s not in by_stem]
        if missing:
            raise DataError(f"subset {name}: stem {missing[0]!r} not in dataset")
        out.append((name, [by_stem[s] for s in stems]))
        union.update((s, by_stem[s]) for s in stems)
    out.append(("full", [union[k] for k in sorted(union)]))
    return out


def cmd_eval(args):
    model = _load_model(args.model)
    root = _require_dir(args.data)
    samples = load_dataset(root, box_margin=args.box_margin)
    if len(samples[0].shape) != model.n_landmarks:
        raise DataError(f"model has {model.n_landmarks} landmarks, dataset {len(samples[0].shape)}")
    rows = []
    for name, subset in _subsets(args, samples):
        for p in args.p:
            err = evaluate(model, subset, p, args.seed, args.threads)
            rows.append({"subset": name, "p": p, "mean_err": float(err.mean()),
                         "median_err": float(np.median(err)), "n": len(err)})
    _write_csv(args.out, ["subset", "p", "mean_err", "median_err", "n"], rows)
    if args.series:
        kib = Path(args.model).stat().st_size / 1024
        _write_csv(args.series, ["subset", "p", "storage_kib", "mean_err"],
                   [{"subset": r["subset"], "p": r["p"], "storage_kib": kib,
                     "mean_err": r["mean_err"]} for r in rows])
    return EXIT_OK


def cmd_quantize(args):
    if not 2 <= args.q <= 8:
        raise UsageError("q must lie in [2, 8]")
    model = _load_model(args.model)
    if model.q is not None:
        raise DataError("model is already quantized")
    qmodel = _quantized(model, args.q, args.seed)
    nbytes = modelio.save(qmodel, args.out)
    rep = memory_report(qmodel).as_dict()
    rep.update({"q": args.q, "decoder": qmodel.kind, "file_bytes": nbytes,
                "unquantized_file_bytes": Path(args.model).stat().st_size, "seed": args.seed})
    _write_json(args.report, rep)
    return EXIT_OK


def bench_rows(model, samples, ps, thread_counts, repetitions, warmup=1, seed=0):
    rows = []
    for p in ps:
        for th in thread_counts:
            for _ in range(warmup):
                predict_batch(model, samples, p, seed, th)
            ms = [predict_batch(model, samples, p, seed, th).ms_per_face for _ in range(repetitions)]
            rows.append({"decoder": model.kind, "p": p, "threads": th,
                         "ms_mean": float(np.mean(ms)), "ms_std": float(np.std(ms))})
    return rows


def cmd_bench(args):
    model = _load_model(args.model)
    samples = load_dataset(_require_dir(args.data), box_margin=args.box_margin)
    if args.limit:
        samples = samples[:args.limit]
    if args.repetitions < 1:
        raise UsageError("repetitions must be positive")
    rows = bench_rows(model, samples, args.p, args.threads, args.repetitions, args.warmup, args.seed)
    _write_csv(args.out, ["decoder", "p", "threads", "ms_mean", "ms_std"], rows)
    return EXIT_OK


def cmd_synth(args):
    spec = SyntheticSpec(n_landmarks=args.landmarks, image_size=args.size, count=args.count,
                         seed=args.seed, noise=args.noise)
    samples, meta = generate_synthetic(spec)
    save_dataset(samples, args.out, meta)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_predict(args):
    model = _load_model(args.model)
    if args.image:
        if args.box is None or args.out is None:
            raise UsageError("--image needs --box and --out")
        image = read_image(args.image)
        shape = predict(model, image, args.box, args.p, np.random.default_rng([args.seed, 0]))
        save_landmarks(args.out, box_to_image(shape, args.box))
        return EXIT_OK
    if args.data is None or args.out_dir is None:
        raise UsageError("give --image/--box/--out or --data/--out-dir")
    samples = load_dataset(_require_dir(args.data), box_margin=args.box_margin)
    res = predict_batch(model, samples, args.p, args.seed, args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s, shape in zip(samples, res.shapes):
        save_landmarks(out / f"{s.source}.pts", box_to_image(shape, s.box))
    print(f"wrote {len(samples)} landmark files to {out} ({res.ms_per_face:.3f} ms/face)")
    return EXIT_OK


def cmd_inspect(args):
    if not Path(args.model).is_file():
        raise UsageError(f"model file {args.model} does not exist")
    info = modelio.inspect(args.model)
    print(json.dumps(info, indent=2) if args.json else modelio.format_inspect(info))
    return EXIT_OK


def _write_csv(path, fields, rows):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()


# -- parser ------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="tcsc", description="Compressed tree-cascade face alignment.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a cascade and write a model file plus JSON report")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--data", help="dataset directory (overrides 'data')")
    p.add_argument("--out", help="model output path (overrides 'out')")
    p.set_defaults(func=cmd_train)

    def common_data(p):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--box-margin", type=float, default=0.1,
                       help="margin for boxes derived from landmarks when no .box file exists")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="normalized error table as CSV")
    p.add_argument("model")
    common_data(p)
    p.add_argument("--p", type=_int_list, default=[1, 7, 15], help="initializations, e.g. 1,7,15")
    p.add_argument("--subset", action="append", default=[], metavar="NAME=INDEX",
                   help="named subset given by an index file of stems (repeatable)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--series", help="also write storage-vs-error points to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="quantize the Phi-facing matrices to q bits")
    p.add_argument("model")
    p.add_argument("--q", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="JSON memory report path (default stdout)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("bench", help="per-face timing CSV")
    p.add_argument("model")
    common_data(p)
    p.add_argument("--p", type=_int_list, default=[1, 3, 7, 15])
    p.add_argument("--threads", type=_int_list, default=[1])
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--limit", type=int, default=0, help="use only the first N samples")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic dataset (PGM + landmark files)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=600)
    p.add_argument("--landmarks", type=int, default=10)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--noise", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("predict", help="write predicted landmark files")
    p.add_argument("model")
    p.add_argument("--image")
    p.add_argument("--box", type=_box, help="x,y,w,h in pixels")
    p.add_argument("--out", help="landmark file for --image")
    p.add_argument("--data", help="dataset directory to predict")
    p.add_argument("--out-dir")
    p.add_argument("--box-margin", type=float, default=0.1)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="print model header and section sizes")
    p.add_argument("model")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"tcsc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelFormatError, OSError) as exc:
        print(f"tcsc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, TcscError) as exc:
        print(f"tcsc: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
