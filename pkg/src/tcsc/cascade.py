"""Cascaded shape regression: ``S_t = S_{t-1} + decoder_t(forest_t(S_{t-1}))``."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import decoders as dec_mod
from .datasets import Sample, Transform
from .decoders import SGDSchedule
from .ensemble import DEFAULT_RADII, Forest, PixelTable, TrainingSet, TreeParams, train_forest
from .errors import DataError
from .geometry import (IOD_68, FaceBox, check_mirror_map, boxes_to_image, flip_sample, image_to_box,
                       normalized_errors, perturb_box, rotate_points, rotate_sample,
                       scale_shift_box, unflip_shape)

log = logging.getLogger(__name__)

DEFAULT_R_SCHEDULE = (16, 24, 32, 40, 48)
# multi-init perturbations are half the augmentation ranges
INIT_SCALE = (0.95, 1.05)
INIT_SHIFT = (-0.05, 0.05)


@dataclass
class TrainConfig:
    n_trees: int = 5               # per landmark
    depth: int = 5
    stages: int = 5
    augment: int = 20
    decoder: str = "rrr"
    r_schedule: tuple = DEFAULT_R_SCHEDULE
    radii: tuple = DEFAULT_RADII
    n_candidates: int = 128
    ridge: float | None = None     # None: choose on held-out data
    flip_prob: float = 0.5
    max_rotation: float = 20.0
    scale_range: tuple = (0.9, 1.1)
    shift_range: tuple = (-0.1, 0.1)
    sgd: SGDSchedule = field(default_factory=SGDSchedule)
    seed: int = 0
    threads: int = 1

    def check(self, n_landmarks):
        if self.decoder not in dec_mod.KINDS:
            raise DataError(f"decoder must be one of {dec_mod.KINDS}, got {self.decoder!r}")
        if self.stages < 1 or self.n_trees < 1 or self.depth < 1 or self.augment < 1:
            raise DataError("stages, n_trees, depth and augment must be positive")
        if self.depth > 15:
            raise DataError("tree depth above 15 is not supported")
        if self.decoder != "ll":
            if len(self.r_schedule) != self.stages:
                raise DataError(f"r_schedule needs {self.stages} entries, got {len(self.r_schedule)}")
            if any(not 1 <= r < 2 * n_landmarks for r in self.r_schedule):
                raise DataError(f"bottleneck sizes must lie in [1, {2 * n_landmarks})")
        if not self.radii:
            raise DataError("radius schedule is empty")

    def radius(self, t):
        return self.radii[min(t, len(self.radii) - 1)]


@dataclass(eq=False)
class Stage:
    forest: Forest
    decoder: dec_mod.Decoder


@dataclass(eq=False)
class CascadeModel:
    mean_shape: np.ndarray          # (L, 2) float32, box frame
    stages: list
    iod: tuple = IOD_68
    mirror_map: tuple | None = None

    def __post_init__(self):
        self.mean_shape = np.ascontiguousarray(self.mean_shape, dtype=np.float32)
        if not self.stages:
            raise DataError("a cascade needs at least one stage")
        L = self.n_landmarks
        kinds = {s.decoder.kind for s in self.stages}
        if len(kinds) != 1:
            raise DataError(f"mixed decoder kinds {sorted(kinds)}")
        qs = {getattr(s.decoder.first, "q", None) for s in self.stages}
        if len(qs) != 1:
            raise DataError("all stages must share one quantization level")
        first = self.stages[0].forest
        for s in self.stages:
            f = s.forest
            if (f.n_landmarks, f.n_per_landmark, f.depth) != (L, first.n_per_landmark, first.depth):
                raise DataError("stage forests disagree on landmarks, trees or depth")
            if s.decoder.in_dim != f.dim or s.decoder.out_dim != 2 * L:
                raise DataError("decoder dimensions do not match the stage forest")
        self.iod = tuple(int(i) for i in self.iod)
        if len(self.iod) != 2 or not all(0 <= i < L for i in self.iod):
            raise DataError(f"IOD landmarks {self.iod} out of range for {L} landmarks")
        if self.mirror_map is not None:
            self.mirror_map = tuple(int(i) for i in check_mirror_map(self.mirror_map, L))

    @property
    def n_landmarks(self):
        return len(self.mean_shape)

    @property
    def kind(self):
        return self.stages[0].decoder.kind

    @property
    def q(self):
        return getattr(self.stages[0].decoder.first, "q", None)

    @property
    def r_schedule(self):
        if self.kind == "ll":
            return ()
        return tuple(s.decoder.code_dim for s in self.stages)

    def run(self, table, boxes, sample_img=None, start=None, increments=False):
        """Run every stage on a batch; returns box-frame shapes ``(N, L, 2)``.

        With ``increments`` the per-stage updates are returned as well.
        """
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        n = len(boxes)
        if start is None:
            start = np.broadcast_to(self.mean_shape.astype(np.float64), (n,) + self.mean_shape.shape)
        current = np.array(start, dtype=np.float64)
        deltas = []
        for stage in self.stages:
            active = stage.forest.encode_batch(table, current, boxes, sample_img)
            delta = stage.decoder.decode(active).reshape(current.shape)
            current += delta
            if increments:
                deltas.append(delta)
        return (current, deltas) if increments else current


# -- augmentation ------------------------------------------------------------

def augment(samples, A, rng, mirror_map=None, flip_prob=0.5, max_rotation=20.0,
            scale_range=(0.9, 1.1), shift_range=(-0.1, 0.1)):
    """``A`` randomly flipped, rotated and box-perturbed copies of every sample."""
    if flip_prob > 0 and mirror_map is None:
        raise DataError("flipping needs a mirror map")
    out = []
    for s in samples:
        for _ in range(A):
            image, shape, box = s.image, s.shape, s.box
            flipped = bool(flip_prob > 0 and rng.random() < flip_prob)
            if flipped:
                image, shape, box = flip_sample(image, shape, box, mirror_map)
            angle = float(rng.uniform(-max_rotation, max_rotation)) if max_rotation > 0 else 0.0
            center = box.center
            if angle != 0.0:
                image, shape = rotate_sample(image, shape, box, angle)
            box = perturb_box(box, rng, scale_range, shift_range)
            tr = Transform(flipped, angle, center, s.image.shape[1])
            out.append(Sample(image, box, shape, s.source, tr))
    return out


def untransform_shape(sample: Sample, mirror_map=None) -> np.ndarray:
    """Map an augmented sample's landmarks back to its source image."""
    tr = sample.transform
    if tr is None:
        return sample.shape.copy()
    shape = rotate_points(sample.shape, tr.center, -tr.angle)
    if tr.flipped:
        shape = unflip_shape(shape, tr.width, mirror_map)
    return shape


# -- training ----------------------------------------------------------------

@dataclass
class TrainReport:
    stage_error: list = field(default_factory=list)   # mean normalized error, [0] = mean shape
    stage_mse: list = field(default_factory=list)
    decoder_logs: list = field(default_factory=list)
    ridge: list = field(default_factory=list)
    n_samples: int = 0
    seconds: float = 0.0

    def as_dict(self):
        return {"stage_error": self.stage_error, "stage_mse": self.stage_mse,
                "decoder_logs": [lg.as_dict() if lg else None for lg in self.decoder_logs],
                "ridge": self.ridge, "n_samples": self.n_samples, "seconds": self.seconds}


def _fit_decoder(cfg, t, active, Y, dim, groups, rng):
    kind = cfg.decoder
    lam = cfg.ridge
    if kind in ("ll", "rrr") and lam is None:
        lam = dec_mod.select_ridge(active, Y, dim, rng, groups)
    if kind == "ll":
        return dec_mod.fit_ll(active, Y, dim, lam), None, lam
    r = cfg.r_schedule[t]
    if kind == "rrr":
        return dec_mod.fit_rrr(active, Y, dim, r, lam), None, lam
    init = dec_mod.init_weights(kind, (Y.shape[1], dim, r), rng)
    # a zero output layer starts the stage at the zero update
    out_name = "W2" if kind == "rrrbp" else "W3"
    setattr(init, out_name, np.zeros_like(getattr(init, out_name)))
    dec, tlog = dec_mod.fit_sgd(init, active, Y, cfg.sgd, rng, groups=groups)
    return dec, tlog, None


def train_cascade(samples, cfg: TrainConfig, iod=IOD_68, mirror_map=None):
    """Train a cascade; returns ``(model, report)``. Deterministic given ``cfg.seed``."""
    if not samples:
        raise DataError("empty training set")
    L = len(samples[0].shape)
    if any(len(s.shape) != L for s in samples):
        raise DataError("all training shapes must have the same length")
    cfg.check(L)
    t0 = time.perf_counter()
    root = np.random.SeedSequence(cfg.seed)
    aug_seed, *stage_seeds = root.spawn(cfg.stages + 1)
    samples = augment(samples, cfg.augment, np.random.default_rng(aug_seed), mirror_map,
                          cfg.flip_prob, cfg.max_rotation, cfg.scale_range, cfg.shift_range)
    n = len(samples)
    table = PixelTable([s.image for s in samples])
    sample_img = np.arange(n)
    boxes = np.array([s.box.as_array() for s in samples])
    truth = np.stack([s.box_shape for s in samples])
    truth_px = boxes_to_image(truth, boxes)
    groups = np.array([s.source for s in samples])
    mean_shape = truth.mean(axis=0).astype(np.float32)
    current = np.broadcast_to(mean_shape.astype(np.float64), truth.shape).copy()

    report = TrainReport(n_samples=n)

    def record():
        err = normalized_errors(boxes_to_image(current, boxes), truth_px, iod)
        report.stage_error.append(float(err.mean()))
        report.stage_mse.append(float(np.mean((truth - current) ** 2)))

    record()
    stages = []
    for t in range(cfg.stages):
        rng = np.random.default_rng(stage_seeds[t])
        data = TrainingSet(table, sample_img, boxes, current, truth - current)
        params = TreeParams(cfg.depth, cfg.n_candidates, cfg.radius(t))
        forest = train_forest(data, cfg.n_trees, params, rng, cfg.threads)
        active = forest.encode_batch(table, current, boxes, sample_img)
        Y = (truth - current).reshape(n, 2 * L)
        decoder, tlog, lam = _fit_decoder(cfg, t, active, Y, forest.dim, groups, rng)
        current += decoder.decode(active).reshape(current.shape)
        stages.append(Stage(forest, decoder))
        report.decoder_logs.append(tlog)
        report.ridge.append(lam)
        record()
        log.info("stage %d: train error %.3f", t + 1, report.stage_error[-1])
    report.seconds = time.perf_counter() - t0
    model = CascadeModel(mean_shape, stages, tuple(iod),
                         None if mirror_map is None else tuple(int(i) for i in mirror_map))
    return model, report


# -- inference ---------------------------------------------------------------

def init_boxes(box: FaceBox, p, rng, scale_range=INIT_SCALE, shift_range=INIT_SHIFT):
    """The given box followed by ``p - 1`` perturbed ones.

    Perturbation deviations from the range midpoints sum to zero: they come
    in antithetic pairs, and an odd remainder is closed by a triple
    ``(e, -e/2, -e/2)``. Scale and shift act linearly on box-frame points, so
    the perturbations cancel in the average. With ``p == 2`` the single
    extra box sits at the range midpoint.
    """
    lo = np.array([scale_range[0], shift_range[0], shift_range[0]], dtype=np.float64)
    hi = np.array([scale_range[1], shift_range[1], shift_range[1]], dtype=np.float64)
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    m = p - 1
    devs = []
    if m == 1:
        devs.append(np.zeros(3))
    elif m > 1:
        n_pairs = m // 2 if m % 2 == 0 else (m - 3) // 2
        for _ in range(n_pairs):
            e = rng.uniform(-1.0, 1.0, size=3) * half
            devs += [e, -e]
        if m % 2:
            e = rng.uniform(-1.0, 1.0, size=3) * half
            devs += [e, -e / 2, -e / 2]
    boxes = [box]
    for e in devs:
        s, dx, dy = mid + e
        boxes.append(scale_shift_box(box, s, dx, dy))
    return boxes


def predict(model: CascadeModel, image, box: FaceBox, p=1, rng=None,
            scale_range=INIT_SCALE, shift_range=INIT_SHIFT):
    """Landmarks in ``box``'s frame, averaged over ``p`` initializations."""
    if p < 1:
        raise DataError("p must be at least 1")
    if rng is None:
        rng = np.random.default_rng(0)
    boxes = init_boxes(box, p, rng, scale_range, shift_range)
    barr = np.array([b.as_array() for b in boxes])
    table = PixelTable.single(image)
    shapes = model.run(table, barr, np.zeros(p, dtype=np.int64))
    if p == 1:
        return shapes[0]
    return image_to_box(boxes_to_image(shapes, barr), box).mean(axis=0)


def predict_with_increments(model: CascadeModel, image, box: FaceBox):
    """Single-initialization prediction plus the increment of every stage."""
    shapes, deltas = model.run(PixelTable.single(image), box.as_array()[None],
                               np.zeros(1, np.int64), increments=True)
    return shapes[0], [d[0] for d in deltas]


@dataclass
class BatchResult:
    shapes: list            # box-frame shapes
    ms_per_face: float
    p: int
    decoder: str
    threads: int


def sample_rng(seed, i):
    return np.random.default_rng([seed, i])


def predict_batch(model: CascadeModel, samples, p=1, seed=0, threads=1) -> BatchResult:
    """:func:`predict` over many samples; sample ``i`` uses ``sample_rng(seed, i)``."""
    def one(i):
        s = samples[i]
        return predict(model, s.image, s.box, p, sample_rng(seed, i))

    t0 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            shapes = list(pool.map(one, range(len(samples))))
    else:
        shapes = [one(i) for i in range(len(samples))]
    elapsed = time.perf_counter() - t0
    ms = 1000.0 * elapsed / max(1, len(samples))
    return BatchResult(shapes, ms, p, model.kind, threads)


def evaluate(model: CascadeModel, samples, p=1, seed=0, threads=1, iod=None) -> np.ndarray:
    """Per-sample normalized error (percent) of ``predict`` against ground truth."""
    iod = model.iod if iod is None else iod
    res = predict_batch(model, samples, p, seed, threads)
    boxes = np.array([s.box.as_array() for s in samples])
    pred_px = boxes_to_image(np.stack(res.shapes), boxes)
    return normalized_errors(pred_px, np.stack([s.shape for s in samples]), iod)
