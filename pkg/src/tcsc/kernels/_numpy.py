"""Vectorized numpy versions of the loop kernels in ``_numba``."""
import numpy as np


def _fetch(pixels, img_off, img_h, img_w, im, boxes, px, py):
    # im, boxes broadcast against px/py
    x = boxes[..., 0] + px * boxes[..., 2]
    y = boxes[..., 1] + py * boxes[..., 3]
    w = img_w[im]
    c = np.minimum(np.maximum(np.floor(x + 0.5), 0.0), w - 1.0).astype(np.int64)
    r = np.minimum(np.maximum(np.floor(y + 0.5), 0.0), img_h[im] - 1.0).astype(np.int64)
    return pixels[img_off[im] + r * w + c].astype(np.int32)


def pixel_diffs(pixels, img_off, img_h, img_w, sample_img, boxes, pos, idx, offsets):
    im = sample_img[idx][None, :]
    bx = boxes[idx][None, :, :]
    lx = pos[idx, 0][None, :]
    ly = pos[idx, 1][None, :]
    u = offsets[:, None, :]
    a = _fetch(pixels, img_off, img_h, img_w, im, bx, lx + u[..., 0], ly + u[..., 1])
    b = _fetch(pixels, img_off, img_h, img_w, im, bx, lx + u[..., 2], ly + u[..., 3])
    return a - b


def descend_forest(pixels, img_off, img_h, img_w, sample_img, boxes, shapes,
                   tree_landmark, offsets, thresholds, depth):
    n = shapes.shape[0]
    n_trees = tree_landmark.shape[0]
    im = np.broadcast_to(sample_img[:, None], (n, n_trees))
    bx = boxes[:, None, :]
    lm = shapes[:, tree_landmark, :]
    trees = np.arange(n_trees)[None, :]
    node = np.zeros((n, n_trees), dtype=np.int64)
    for _ in range(depth):
        u = offsets[trees, node]
        a = _fetch(pixels, img_off, img_h, img_w, im, bx,
                   lm[..., 0] + u[..., 0], lm[..., 1] + u[..., 1])
        b = _fetch(pixels, img_off, img_h, img_w, im, bx,
                   lm[..., 0] + u[..., 2], lm[..., 1] + u[..., 3])
        node = 2 * node + 1 + (a - b > thresholds[trees, node])
    return (node - ((1 << depth) - 1)).astype(np.int32)


def gather_sum(matrix, active):
    cols = matrix.T[active].astype(np.float64)
    return np.add.reduce(cols, axis=1)


def gather_sum_codebook(codebooks, indices, active):
    rows = np.arange(codebooks.shape[0])
    cols = codebooks[rows, indices.T[active]].astype(np.float64)
    return np.add.reduce(cols, axis=1)


def scatter_add(matrix, active, grads, scale):
    k_active = active.shape[1]
    np.add.at(matrix.T, active.ravel(), np.repeat(scale * grads, k_active, axis=0))
