"""Pixel-difference trees, per-landmark forests and the sparse leaf encoding.

Each tree is complete and stored breadth-first: node ``i`` has children
``2i + 1`` (test false) and ``2i + 2`` (test true). Test offsets are
signed 8-bit codes in units of ``radius / 127`` box-frame widths, so a
trained forest is exactly representable in the model file.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .errors import DataError
from .geometry import FaceBox

CODE_MAX = 127
DEFAULT_CANDIDATES = 128
DEFAULT_RADII = (0.4, 0.3, 0.2, 0.15, 0.1)


class PixelTable:
    """A batch of grayscale images flattened into one buffer for the kernels.

    Samples reference images by index so augmented copies or repeated
    initializations can share pixels.
    """

    def __init__(self, images):
        images = [np.ascontiguousarray(im, dtype=np.uint8) for im in images]
        if not images:
            raise DataError("no images")
        for im in images:
            if im.ndim != 2 or im.size == 0:
                raise DataError(f"images must be nonempty 2-D uint8 arrays, got {im.shape}")
        self.img_h = np.array([im.shape[0] for im in images], dtype=np.int64)
        self.img_w = np.array([im.shape[1] for im in images], dtype=np.int64)
        sizes = self.img_h * self.img_w
        self.img_off = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.pixels = np.concatenate([im.ravel() for im in images])

    def __len__(self):
        return len(self.img_h)

    @classmethod
    def single(cls, image):
        return cls([image])

    def args(self):
        return self.pixels, self.img_off, self.img_h, self.img_w


def boxes_array(boxes) -> np.ndarray:
    if isinstance(boxes, FaceBox):
        boxes = [boxes]
    if isinstance(boxes, np.ndarray):
        return np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class PixelTest:
    """``F[p1] - F[p2] > threshold`` with points offset from a landmark (box frame)."""

    u1: tuple
    u2: tuple
    threshold: int


def eval_test(test: PixelTest, image, landmark_pos, box: FaceBox) -> int:
    table = PixelTable.single(image)
    offsets = np.array([[test.u1[0], test.u1[1], test.u2[0], test.u2[1]]], dtype=np.float64)
    pos = np.asarray(landmark_pos, dtype=np.float64).reshape(1, 2)
    diff = kernels.pixel_diffs(*table.args(), np.zeros(1, np.int64), boxes_array(box),
                               pos, np.zeros(1, np.int64), offsets)
    return int(diff[0, 0] > test.threshold)


@dataclass(eq=False)
class Tree:
    depth: int
    codes: np.ndarray        # (2^d - 1, 4) int8: u1x, u1y, u2x, u2y
    thresholds: np.ndarray   # (2^d - 1,) int16
    landmark: int
    radius: float

    @property
    def scale(self):
        return float(self.radius) / CODE_MAX

    def test(self, node) -> PixelTest:
        u = self.codes[node].astype(np.float64) * self.scale
        return PixelTest((u[0], u[1]), (u[2], u[3]), int(self.thresholds[node]))


def descend(tree: Tree, image, shape, box: FaceBox) -> int:
    """Leaf index reached by ``tree`` in ``[0, 2**depth)``."""
    table = PixelTable.single(image)
    shape = np.ascontiguousarray(np.asarray(shape, np.float64)[None])
    offsets = (tree.codes.astype(np.float64) * tree.scale)[None]
    leaves = kernels.descend_forest(*table.args(), np.zeros(1, np.int64), boxes_array(box), shape,
                                    np.array([tree.landmark], np.int64), offsets,
                                    tree.thresholds.astype(np.int32)[None], tree.depth)
    return int(leaves[0, 0])


@dataclass(eq=False)
class Forest:
    """``n_per_landmark`` trees for each landmark, tree ``k`` anchored at landmark ``k // n``."""

    depth: int
    n_per_landmark: int
    n_landmarks: int
    radius: float
    codes: np.ndarray        # (n_trees, 2^d - 1, 4) int8
    thresholds: np.ndarray   # (n_trees, 2^d - 1) int16

    def __post_init__(self):
        self.radius = float(np.float32(self.radius))
        n_nodes = (1 << self.depth) - 1
        expect = (self.n_trees, n_nodes)
        if self.codes.shape != expect + (4,) or self.thresholds.shape != expect:
            raise DataError(f"forest arrays do not match {self.n_trees} trees of depth {self.depth}")
        self.codes = np.ascontiguousarray(self.codes, dtype=np.int8)
        self.thresholds = np.ascontiguousarray(self.thresholds, dtype=np.int16)

    @property
    def n_trees(self):
        return self.n_landmarks * self.n_per_landmark

    @property
    def n_leaves(self):
        return 1 << self.depth

    @property
    def dim(self):
        """Length of the sparse indicator vector."""
        return self.n_trees * self.n_leaves

    @cached_property
    def _kernel_arrays(self):
        scale = self.radius / CODE_MAX
        offsets = self.codes.astype(np.float64) * scale
        thresholds = self.thresholds.astype(np.int32)
        tree_lm = np.repeat(np.arange(self.n_landmarks), self.n_per_landmark).astype(np.int64)
        return tree_lm, offsets, thresholds

    def tree(self, k) -> Tree:
        return Tree(self.depth, self.codes[k].copy(), self.thresholds[k].copy(),
                    k // self.n_per_landmark, self.radius)

    def leaves(self, table: PixelTable, shapes, boxes, sample_img=None) -> np.ndarray:
        """Leaf index per (sample, tree); ``shapes`` are box-frame ``(N, L, 2)``."""
        shapes = np.ascontiguousarray(shapes, dtype=np.float64)
        if shapes.ndim != 3 or shapes.shape[1] != self.n_landmarks:
            raise DataError(f"expected shapes of {self.n_landmarks} landmarks, got {shapes.shape}")
        if sample_img is None:
            sample_img = np.arange(len(shapes), dtype=np.int64)
        tree_lm, offsets, thresholds = self._kernel_arrays
        return kernels.descend_forest(*table.args(), np.asarray(sample_img, np.int64),
                                      boxes_array(boxes), shapes, tree_lm, offsets,
                                      thresholds, self.depth)

    def encode_batch(self, table, shapes, boxes, sample_img=None) -> np.ndarray:
        """Active indicator positions, ``(N, n_trees)`` int64, one per tree block."""
        leaves = self.leaves(table, shapes, boxes, sample_img)
        return leaves.astype(np.int64) + np.arange(self.n_trees, dtype=np.int64) * self.n_leaves


@dataclass(frozen=True, eq=False)
class SparseEncoding:
    """Positions of the ones in the indicator vector."""

    active: np.ndarray
    dim: int

    def dense(self) -> np.ndarray:
        v = np.zeros(self.dim)
        v[self.active] = 1.0
        return v


def encode(forest: Forest, image, shape, box: FaceBox) -> SparseEncoding:
    active = forest.encode_batch(PixelTable.single(image), np.asarray(shape, np.float64)[None],
                                 boxes_array(box))
    return SparseEncoding(active[0], forest.dim)


# -- training ---------------------------------------------------------------

@dataclass
class TreeParams:
    depth: int = 5
    n_candidates: int = DEFAULT_CANDIDATES
    radius: float = 0.4


@dataclass(eq=False)
class TrainingSet:
    """What tree growth needs: pixels, per-sample boxes and landmark estimates.

    ``shapes`` are current box-frame estimates ``(N, L, 2)`` and ``targets``
    the ground-truth minus estimate offsets of the same layout.
    """

    table: PixelTable
    sample_img: np.ndarray
    boxes: np.ndarray
    shapes: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.sample_img = np.asarray(self.sample_img, dtype=np.int64)
        self.boxes = boxes_array(self.boxes)
        self.shapes = np.ascontiguousarray(self.shapes, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.shapes) == 0:
            raise DataError("empty training set")
        if not (len(self.sample_img) == len(self.boxes) == len(self.shapes) == len(self.targets)):
            raise DataError("training arrays have inconsistent lengths")
        if self.targets.shape != self.shapes.shape:
            raise DataError("targets must match shapes")

    def __len__(self):
        return len(self.shapes)


def sample_candidate_codes(rng, n, radius):
    """Integer offset codes for ``n`` tests, both points uniform in a disc of ``radius``."""
    r = np.sqrt(rng.random((n, 2)))
    t = 2 * np.pi * rng.random((n, 2))
    u = np.empty((n, 4))
    u[:, 0::2] = r * np.cos(t) * CODE_MAX
    u[:, 1::2] = r * np.sin(t) * CODE_MAX
    return np.clip(np.rint(u), -CODE_MAX, CODE_MAX).astype(np.int8)


def _sse(counts, sums, sq):
    with np.errstate(invalid="ignore", divide="ignore"):
        out = sq - np.where(counts[:, None] > 0, sums**2 / counts[:, None], 0.0)
    return out.sum(axis=1)


def best_split(diffs, targets, rng):
    """Choose the candidate and threshold minimizing summed child SSE.

    Returns ``(candidate, threshold, child_sse)``.
    """
    n_cand, m = diffs.shape
    pick = rng.integers(0, m, size=n_cand)
    thr = diffs[np.arange(n_cand), pick]
    right = (diffs > thr[:, None]).astype(np.float64)
    t2 = targets**2
    n_r = right.sum(axis=1)
    s_r = right @ targets
    q_r = right @ t2
    n_l = m - n_r
    s_l = targets.sum(axis=0) - s_r
    q_l = t2.sum(axis=0) - q_r
    cost = _sse(n_l, s_l, q_l) + _sse(n_r, s_r, q_r)
    best = int(np.argmin(cost))
    return best, int(thr[best]), float(cost[best])


def node_sse(targets) -> float:
    if len(targets) == 0:
        return 0.0
    return float(((targets - targets.mean(axis=0)) ** 2).sum())


def train_tree(data: TrainingSet, landmark: int, params: TreeParams, rng, sample_idx=None) -> Tree:
    """Greedy top-down variance-reduction growth to exact depth.

    ``sample_idx`` selects (with repetition) which samples the tree sees.
    Nodes with fewer than two samples or zero spread get the always-false
    test ``u1 = u2 = 0, threshold 0``.
    """
    if sample_idx is None:
        sample_idx = np.arange(len(data))
    sample_idx = np.asarray(sample_idx, dtype=np.int64)
    if len(sample_idx) == 0:
        raise DataError("cannot train a tree on an empty sample set")
    if not 0 <= landmark < data.shapes.shape[1]:
        raise DataError(f"landmark {landmark} out of range")
    depth = params.depth
    n_nodes = (1 << depth) - 1
    codes = np.zeros((n_nodes, 4), np.int8)
    thresholds = np.zeros(n_nodes, np.int16)
    radius = float(np.float32(params.radius))
    scale = radius / CODE_MAX
    pos = np.ascontiguousarray(data.shapes[:, landmark, :])
    targets = data.targets[:, landmark, :]
    args = data.table.args()

    members = {0: sample_idx}
    for node in range(n_nodes):
        idx = members.pop(node)
        t = targets[idx]
        if len(idx) >= 2 and node_sse(t) > 0:
            cand = sample_candidate_codes(rng, params.n_candidates, radius)
            diffs = kernels.pixel_diffs(*args, data.sample_img, data.boxes, pos, idx,
                                        cand.astype(np.float64) * scale)
            c, thr, _ = best_split(diffs, t, rng)
            codes[node] = cand[c]
            thresholds[node] = thr
            go_right = diffs[c] > thr
        else:
            go_right = np.zeros(len(idx), dtype=bool)
        if 2 * node + 1 < n_nodes:
            members[2 * node + 1] = idx[~go_right]
            members[2 * node + 2] = idx[go_right]
    return Tree(depth, codes, thresholds, landmark, radius)


def train_forest(data: TrainingSet, n_per_landmark: int, params: TreeParams, rng,
                 threads: int = 1) -> Forest:
    """Train ``n_per_landmark`` bootstrap-resampled trees per landmark.

    Every tree draws from its own child seed, so the result does not
    depend on ``threads``.
    """
    n_landmarks = data.shapes.shape[1]
    n_trees = n_landmarks * n_per_landmark
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(n_trees)
    n = len(data)

    def grow(k):
        tree_rng = np.random.default_rng(seeds[k])
        boot = tree_rng.integers(0, n, size=n)
        return train_tree(data, k // n_per_landmark, params, tree_rng, boot)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            trees = list(pool.map(grow, range(n_trees)))
    else:
        trees = [grow(k) for k in range(n_trees)]
    return Forest(
        depth=params.depth, n_per_landmark=n_per_landmark, n_landmarks=n_landmarks,
        radius=params.radius,
        codes=np.stack([t.codes for t in trees]),
        thresholds=np.stack([t.thresholds for t in trees]),
    )


def random_forest(n_landmarks, n_per_landmark, depth, radius, rng, max_threshold=32) -> Forest:
    """Untrained forest with random tests, for sizing and speed measurements."""
    n_trees = n_landmarks * n_per_landmark
    n_nodes = (1 << depth) - 1
    codes = sample_candidate_codes(rng, n_trees * n_nodes, radius).reshape(n_trees, n_nodes, 4)
    thr = rng.integers(-max_threshold, max_threshold + 1, size=(n_trees, n_nodes))
    return Forest(depth, n_per_landmark, n_landmarks, radius, codes, thr.astype(np.int16))


# one node record: four int8 offset codes + int16 threshold
NODE_BYTES = 6


def forest_nbytes(forest: Forest) -> int:
    """Serialized size: float32 radius plus one record per internal node."""
    return 4 + forest.n_trees * ((1 << forest.depth) - 1) * NODE_BYTES
