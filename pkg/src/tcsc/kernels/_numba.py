"""Loop kernels compiled with numba.

Every function here has a vectorized twin in ``_numpy`` with the same
signature. Integer outputs are identical between the two; float
accumulations run in the same (sequential, tree-order) sequence.
"""
import numpy as np
from numba import njit


@njit(inline="always", cache=True)
def _fetch(pixels, off, h, w, box, px, py):
    x = box[0] + px * box[2]
    y = box[1] + py * box[3]
    c = min(max(np.floor(x + 0.5), 0.0), w - 1.0)
    r = min(max(np.floor(y + 0.5), 0.0), h - 1.0)
    return np.int32(pixels[off + np.int64(r) * w + np.int64(c)])


@njit(nogil=True, cache=True)
def pixel_diffs(pixels, img_off, img_h, img_w, sample_img, boxes, pos, idx, offsets):
    """Intensity differences F[p1] - F[p2] for C candidate tests over samples ``idx``."""
    n_cand = offsets.shape[0]
    m = idx.shape[0]
    out = np.empty((n_cand, m), dtype=np.int32)
    for j in range(m):
        s = idx[j]
        im = sample_img[s]
        off = img_off[im]
        h = img_h[im]
        w = img_w[im]
        box = boxes[s]
        lx = pos[s, 0]
        ly = pos[s, 1]
        for c in range(n_cand):
            a = _fetch(pixels, off, h, w, box, lx + offsets[c, 0], ly + offsets[c, 1])
            b = _fetch(pixels, off, h, w, box, lx + offsets[c, 2], ly + offsets[c, 3])
            out[c, j] = a - b
    return out


@njit(nogil=True, cache=True)
def descend_forest(pixels, img_off, img_h, img_w, sample_img, boxes, shapes,
                   tree_landmark, offsets, thresholds, depth):
    n = shapes.shape[0]
    n_trees = tree_landmark.shape[0]
    first_leaf = (1 << depth) - 1
    leaves = np.empty((n, n_trees), dtype=np.int32)
    for s in range(n):
        im = sample_img[s]
        off = img_off[im]
        h = img_h[im]
        w = img_w[im]
        box = boxes[s]
        for k in range(n_trees):
            lm = tree_landmark[k]
            lx = shapes[s, lm, 0]
            ly = shapes[s, lm, 1]
            node = 0
            for _ in range(depth):
                u = offsets[k, node]
                a = _fetch(pixels, off, h, w, box, lx + u[0], ly + u[1])
                b = _fetch(pixels, off, h, w, box, lx + u[2], ly + u[3])
                if a - b > thresholds[k, node]:
                    node = 2 * node + 2
                else:
                    node = 2 * node + 1
            leaves[s, k] = node - first_leaf
    return leaves


@njit(nogil=True, cache=True)
def gather_sum(matrix, active):
    n, k_active = active.shape
    rows = matrix.shape[0]
    out = np.zeros((n, rows), dtype=np.float64)
    for s in range(n):
        for k in range(k_active):
            col = active[s, k]
            for i in range(rows):
                out[s, i] += np.float64(matrix[i, col])
    return out


@njit(nogil=True, cache=True)
def gather_sum_codebook(codebooks, indices, active):
    n, k_active = active.shape
    rows = codebooks.shape[0]
    out = np.zeros((n, rows), dtype=np.float64)
    for s in range(n):
        for k in range(k_active):
            col = active[s, k]
            for i in range(rows):
                out[s, i] += np.float64(codebooks[i, indices[i, col]])
    return out


@njit(nogil=True, cache=True)
def scatter_add(matrix, active, grads, scale):
    n, k_active = active.shape
    rows = matrix.shape[0]
    for s in range(n):
        for k in range(k_active):
            col = active[s, k]
            for i in range(rows):
                matrix[i, col] += scale * grads[s, i]
