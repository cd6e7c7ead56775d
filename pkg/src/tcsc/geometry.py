"""Shapes, face boxes, augmentation transforms and the normalized error.

A shape is an ``(L, 2)`` float array of ``(x, y)`` landmark coordinates.
Inside models shapes live in the box frame: the face box maps onto the
unit square. Image coordinates put pixel centers on integers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInputError

# outer eye corners, zero-based, 68-point Multi-PIE layout
IOD_68 = (36, 45)


def _mirror_68():
    perm = list(range(68))
    pairs = [(i, 16 - i) for i in range(8)]                 # jaw
    pairs += [(17 + i, 26 - i) for i in range(5)]           # brows
    pairs += [(31, 35), (32, 34)]                           # nostrils
    pairs += [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]
    pairs += [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]
    pairs += [(60, 64), (61, 63), (65, 67)]
    for a, b in pairs:
        perm[a], perm[b] = b, a
    return tuple(perm)


MIRROR_68 = _mirror_68()


@dataclass(frozen=True)
class FaceBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateInputError(f"face box needs positive size, got {self.w}x{self.h}")

    @property
    def center(self):
        return (self.x + 0.5 * self.w, self.y + 0.5 * self.h)

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def as_shape(points) -> np.ndarray:
    s = np.asarray(points, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 2:
        raise DataError(f"shape must be (L, 2), got {s.shape}")
    return s


def normalized_error(pred, truth, iod_pair=IOD_68) -> float:
    """Mean point-to-point distance as a percentage of the inter-ocular distance.

    ``iod_pair`` names the two outer eye corners in ``truth``.
    """
    pred = as_shape(pred)
    truth = as_shape(truth)
    if pred.shape != truth.shape:
        raise DataError(f"shape lengths differ: {len(pred)} vs {len(truth)}")
    a, b = iod_pair
    iod = float(np.hypot(*(truth[a] - truth[b])))
    if not iod > 0:
        raise DegenerateInputError("inter-ocular distance is zero")
    return 100.0 * float(np.mean(np.hypot(*(pred - truth).T))) / iod


def image_to_box(points, box: FaceBox) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.stack([(p[..., 0] - box.x) / box.w, (p[..., 1] - box.y) / box.h], axis=-1)


def box_to_image(points, box: FaceBox) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.stack([box.x + p[..., 0] * box.w, box.y + p[..., 1] * box.h], axis=-1)


def check_mirror_map(perm, length=None) -> np.ndarray:
    m = np.asarray(perm, dtype=np.int64)
    if length is not None and len(m) != length:
        raise DataError(f"mirror map has {len(m)} entries, shape has {length}")
    if m.ndim != 1 or sorted(m.tolist()) != list(range(len(m))):
        raise DataError("mirror map is not a permutation")
    if not np.array_equal(m[m], np.arange(len(m))):
        raise DataError("mirror map is not an involution")
    return m


def mirror_shape(shape, mirror_map) -> np.ndarray:
    """Horizontal flip in the box frame followed by left/right relabeling."""
    s = as_shape(shape)
    m = check_mirror_map(mirror_map, len(s))
    flipped = np.column_stack([1.0 - s[:, 0], s[:, 1]])
    return flipped[m]


def flip_sample(image, shape_px, box: FaceBox, mirror_map):
    """Mirror an image, its pixel-space landmarks and its box.

    Equivalent to :func:`mirror_shape` in the box frame.
    """
    s = as_shape(shape_px)
    m = check_mirror_map(mirror_map, len(s))
    width = image.shape[1]
    flipped = np.column_stack([(width - 1) - s[:, 0], s[:, 1]])[m]
    new_box = FaceBox((width - 1) - box.x - box.w, box.y, box.w, box.h)
    return np.ascontiguousarray(image[:, ::-1]), flipped, new_box


def unflip_shape(shape_px, width, mirror_map) -> np.ndarray:
    s = as_shape(shape_px)
    m = check_mirror_map(mirror_map, len(s))
    # the relabeling is an involution, so undoing it reuses the same map
    s = s[m]
    return np.column_stack([(width - 1) - s[:, 0], s[:, 1]])


def scale_shift_box(box: FaceBox, scale, dx, dy) -> FaceBox:
    """Box scaled by ``scale`` about its center, center moved by ``(dx, dy)`` box sizes."""
    if scale == 1.0 and dx == 0.0 and dy == 0.0:
        return box
    cx, cy = box.center
    cx += dx * box.w
    cy += dy * box.h
    w, h = scale * box.w, scale * box.h
    return FaceBox(cx - 0.5 * w, cy - 0.5 * h, w, h)


def _draw(rng, lo, hi, size=None):
    if hi > lo:
        return rng.uniform(lo, hi, size=size)
    return lo if size is None else np.full(size, float(lo))


def perturb_box(box: FaceBox, rng, scale_range=(0.9, 1.1), shift_range=(-0.1, 0.1)) -> FaceBox:
    """Rescale a box about its center and shift it by a fraction of its size."""
    s = _draw(rng, *scale_range)
    dx, dy = _draw(rng, *shift_range, size=2)
    return scale_shift_box(box, s, dx, dy)


def rotation_matrix(angle_deg):
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def rotate_points(points, center, angle_deg) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    if angle_deg == 0:
        return p.copy()
    return (p - c) @ rotation_matrix(angle_deg).T + c


def rotate_image(image, center, angle_deg) -> np.ndarray:
    """Nearest-neighbor rotation about ``center``; borders replicate edge pixels."""
    if angle_deg == 0:
        return image.copy()
    h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out_pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = rotate_points(out_pts, center, -angle_deg)
    c = np.clip(np.floor(src[:, 0] + 0.5), 0, w - 1).astype(np.int64)
    r = np.clip(np.floor(src[:, 1] + 0.5), 0, h - 1).astype(np.int64)
    return image[r, c].reshape(h, w)


def rotate_sample(image, shape_px, box: FaceBox, angle_deg):
    """Rotate image content and pixel-space landmarks about the box center.

    The box itself stays axis-aligned.
    """
    center = box.center
    return rotate_image(image, center, angle_deg), rotate_points(shape_px, center, angle_deg)


def boxes_to_image(shapes, boxes) -> np.ndarray:
    """Box-frame ``(N, L, 2)`` shapes to pixels, ``boxes`` an ``(N, 4)`` array."""
    b = np.asarray(boxes, dtype=np.float64)[:, None, :]
    return b[..., :2] + np.asarray(shapes, dtype=np.float64) * b[..., 2:]


def normalized_errors(pred, truth, iod_pair=IOD_68) -> np.ndarray:
    """Per-sample :func:`normalized_error` for ``(N, L, 2)`` arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"shape arrays differ: {pred.shape} vs {truth.shape}")
    a, b = iod_pair
    iod = np.hypot(*(truth[:, a] - truth[:, b]).T)
    if np.any(~(iod > 0)):
        raise DegenerateInputError("inter-ocular distance is zero")
    d = np.hypot(pred[..., 0] - truth[..., 0], pred[..., 1] - truth[..., 1])
    return 100.0 * d.mean(axis=1) / iod
