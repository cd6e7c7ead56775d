"""Row-wise k-means quantization of the Phi-facing decoder matrix.

Each row gets its own ascending codebook of ``2**q`` float32 centroids and
every weight is replaced by a ``q``-bit index. Indices are packed
row-major, least significant bit first within each byte.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .ensemble import forest_nbytes
from .errors import DataError

MIN_BITS, MAX_BITS = 2, 8


def _assign(x, centroids):
    # centroids sorted; ties go to the lower index
    mid = 0.5 * (centroids[1:] + centroids[:-1])
    return np.searchsorted(mid, x, side="left")


def _kmeanspp(x, k, rng):
    centers = np.empty(k)
    centers[0] = x[rng.integers(len(x))]
    d2 = (x - centers[0]) ** 2
    for j in range(1, k):
        cum = np.cumsum(d2)
        i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        centers[j] = x[min(i, len(x) - 1)]
        d2 = np.minimum(d2, (x - centers[j]) ** 2)
    return np.sort(centers)


def kmeans_1d(values, k, rng, max_iters=100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns ``k`` sorted centroids.

    With at most ``k`` distinct values the centroids are those values
    (padded by repeating the largest), so quantization is lossless.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise DataError("kmeans_1d needs at least one value")
    if k < 1:
        raise DataError("k must be positive")
    uniq = np.unique(x)
    if len(uniq) <= k:
        return np.concatenate([uniq, np.full(k - len(uniq), uniq[-1])])

    c = _kmeanspp(x, k, rng)
    labels = None
    for _ in range(max_iters):
        new = _assign(x, c)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        sums = np.bincount(labels, weights=x, minlength=k)
        c = np.where(counts > 0, sums / np.maximum(counts, 1), c)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            dist = np.abs(x - c[labels])
            for j in empty:
                far = int(np.argmax(dist))
                c[j] = x[far]
                dist[far] = -1.0
        order = np.argsort(c, kind="stable")
        c = c[order]
        labels = np.argsort(order)[labels]
    return c


def pack_indices(indices, q) -> np.ndarray:
    flat = np.asarray(indices, dtype=np.uint16).ravel()
    if flat.size and flat.max() >= (1 << q):
        raise DataError(f"index does not fit in {q} bits")
    bits = ((flat[:, None] >> np.arange(q, dtype=np.uint16)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little")


def unpack_indices(packed, count, q) -> np.ndarray:
    bits = np.unpackbits(np.asarray(packed, dtype=np.uint8), count=count * q, bitorder="little")
    weights = (1 << np.arange(q)).astype(np.uint16)
    return (bits.reshape(count, q).astype(np.uint16) @ weights).astype(np.uint8)


def payload_nbytes(rows, cols, q) -> int:
    return math.ceil(rows * cols * q / 8)


def codebook_nbytes(rows, q) -> int:
    return rows * (1 << q) * 4


@dataclass(eq=False)
class QuantizedMatrix:
    rows: int
    cols: int
    q: int
    codebooks: np.ndarray   # (rows, 2^q) float32, ascending per row
    packed: np.ndarray      # uint8 payload

    def __post_init__(self):
        if not MIN_BITS <= self.q <= MAX_BITS:
            raise DataError(f"q must lie in [{MIN_BITS}, {MAX_BITS}], got {self.q}")
        self.codebooks = np.ascontiguousarray(self.codebooks, dtype=np.float32)
        self.packed = np.ascontiguousarray(self.packed, dtype=np.uint8)
        if self.codebooks.shape != (self.rows, 1 << self.q):
            raise DataError("codebook shape does not match rows and q")
        if self.packed.size != payload_nbytes(self.rows, self.cols, self.q):
            raise DataError("packed payload has the wrong length")

    @property
    def shape(self):
        return (self.rows, self.cols)

    @cached_property
    def indices(self) -> np.ndarray:
        return unpack_indices(self.packed, self.rows * self.cols, self.q).reshape(self.rows, self.cols)

    def dequantize(self) -> np.ndarray:
        return self.codebooks[np.arange(self.rows)[:, None], self.indices]

    def gather_sum(self, active) -> np.ndarray:
        """Column sums with centroids looked up on the fly."""
        return kernels.gather_sum_codebook(self.codebooks, self.indices, active)

    @property
    def payload_nbytes(self):
        return self.packed.size

    @property
    def codebook_nbytes(self):
        return self.codebooks.size * 4


def quantize_matrix(matrix, q, rng, max_iters=100) -> QuantizedMatrix:
    """Quantize each row against its own ``2**q`` k-means codebook."""
    if not MIN_BITS <= q <= MAX_BITS:
        raise DataError(f"q must lie in [{MIN_BITS}, {MAX_BITS}], got {q}")
    m = np.asarray(matrix, dtype=np.float32)
    rows, cols = m.shape
    k = 1 << q
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(rows)
    codebooks = np.empty((rows, k), dtype=np.float32)
    indices = np.empty((rows, cols), dtype=np.uint8)
    for i in range(rows):
        c = kmeans_1d(m[i], k, np.random.default_rng(seeds[i]), max_iters).astype(np.float32)
        c.sort()
        codebooks[i] = c
        indices[i] = _assign(m[i].astype(np.float64), c.astype(np.float64))
    return QuantizedMatrix(rows, cols, q, codebooks, pack_indices(indices, q))


def quantize_decoder(dec, q, rng):
    """Copy of ``dec`` with only its Phi-facing matrix quantized."""
    first = dec.first
    if not isinstance(first, np.ndarray):
        raise DataError("decoder is already quantized")
    return dec.with_first(quantize_matrix(first, q, rng))


def is_quantized(matrix) -> bool:
    return isinstance(matrix, QuantizedMatrix)


# -- memory accounting -------------------------------------------------------

PARTS = ("quantized_payload", "codebooks", "unquantized", "forest")


@dataclass
class MemoryReport:
    stages: list = field(default_factory=list)   # one dict of PARTS per stage

    @property
    def totals(self):
        return {p: sum(s[p] for s in self.stages) for p in PARTS}

    @property
    def total(self):
        return sum(self.totals.values())

    def as_dict(self):
        return {"stages": self.stages, "totals": self.totals, "total": self.total,
                "total_kib": self.total / 1024}


_KEEP = object()


def memory_report(model, q=_KEEP) -> MemoryReport:
    """Byte counts by part for ``model``.

    By default the model's own state is counted; passing ``q`` (bits, or
    None for float32) projects what the Phi-facing matrices would cost.
    """
    report = MemoryReport()
    for stage in model.stages:
        dec = stage.decoder
        part = dict.fromkeys(PARTS, 0)
        part["forest"] = forest_nbytes(stage.forest)
        for name, arr in dec.matrices().items():
            if name == dec.first_name:
                rows, cols = arr.shape
                bits = (arr.q if is_quantized(arr) else None) if q is _KEEP else q
                if bits is None:
                    part["unquantized"] += rows * cols * 4
                else:
                    part["quantized_payload"] += payload_nbytes(rows, cols, bits)
                    part["codebooks"] += codebook_nbytes(rows, bits)
            else:
                part["unquantized"] += int(np.asarray(arr).size) * 4
        report.stages.append(part)
    return report
