"""Annotated samples on disk, the synthetic benchmark and train/test splits.

A dataset directory holds ``<stem>.pgm`` (or ``.png``/``.jpg``) images with
sibling ``<stem>.pts`` landmark files and optional ``<stem>.box`` files
(``x y w h`` in pixels). An optional ``dataset.cfg`` records ``iod`` and
``mirror_map`` as ``key = value`` lines.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (ConfigError, CoordinateParseError, DataError, DegenerateInputError,
                     HeaderParseError, ImageFormatError, PointCountError)
from .geometry import FaceBox, as_shape, check_mirror_map, image_to_box

IMAGE_SUFFIXES = (".pgm", ".png", ".jpg", ".jpeg", ".bmp")
META_FILE = "dataset.cfg"


@dataclass(frozen=True)
class Transform:
    """How an augmented sample was derived from its source."""

    flipped: bool
    angle: float
    center: tuple
    width: int


@dataclass(eq=False)
class Sample:
    image: np.ndarray          # uint8 (H, W)
    box: FaceBox
    shape: np.ndarray          # (L, 2) image pixels
    source: str = ""
    transform: Transform | None = None

    @property
    def box_shape(self):
        return image_to_box(self.shape, self.box)


@dataclass
class DatasetMeta:
    iod: tuple | None = None
    mirror_map: tuple | None = None


# -- landmark files ----------------------------------------------------------

def _parse_landmarks(text, path):
    lines = text.splitlines()
    header = {}
    i = 0
    while i < len(lines):
        s = lines[i].strip()
        i += 1
        if not s:
            continue
        if s == "{":
            break
        m = re.fullmatch(r"(\w+)\s*:\s*(\S+)", s)
        if not m:
            raise HeaderParseError(path, i, f"unexpected header line {s!r}")
        header[m.group(1)] = m.group(2)
    else:
        raise HeaderParseError(path, i, "missing '{'")
    if header.get("version") != "1":
        raise HeaderParseError(path, 1, f"unsupported version {header.get('version')!r}")
    try:
        n = int(header["n_points"])
    except (KeyError, ValueError):
        raise HeaderParseError(path, 1, "missing or invalid n_points") from None
    if n < 1:
        raise HeaderParseError(path, 1, "n_points must be positive")
    pts = []
    while i < len(lines):
        s = lines[i].strip()
        i += 1
        if not s:
            continue
        if s == "}":
            if len(pts) != n:
                raise PointCountError(path, i, f"expected {n} points, found {len(pts)}")
            return np.array(pts, dtype=np.float64)
        parts = s.split()
        if len(parts) != 2:
            raise CoordinateParseError(path, i, f"expected 'x y', got {s!r}")
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise CoordinateParseError(path, i, f"non-numeric coordinate in {s!r}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise CoordinateParseError(path, i, "non-finite coordinate")
        if len(pts) == n:
            raise PointCountError(path, i, f"more than {n} points")
        pts.append((x, y))
    raise PointCountError(path, i, "missing closing '}'")


def load_landmarks(path) -> np.ndarray:
    path = Path(path)
    return _parse_landmarks(path.read_text(), path)


def format_landmarks(shape) -> str:
    s = as_shape(shape)
    body = "\n".join(f"{x:.6f} {y:.6f}" for x, y in s)
    return f"version: 1\nn_points: {len(s)}\n{{\n{body}\n}}\n"


def save_landmarks(path, shape):
    Path(path).write_text(format_landmarks(shape))


# -- images ------------------------------------------------------------------

def to_gray(rgb) -> np.ndarray:
    """Integer luma ``(77 R + 150 G + 29 B) >> 8``."""
    a = np.asarray(rgb)
    if a.ndim == 2:
        return a.astype(np.uint8)
    a = a[..., :3].astype(np.uint32)
    return ((77 * a[..., 0] + 150 * a[..., 1] + 29 * a[..., 2]) >> 8).astype(np.uint8)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ImageFormatError(f"{path}: only binary PGM (P5) is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: bad PGM header") from None
    if maxval > 255:
        raise ImageFormatError(f"{path}: 16-bit PGM is not supported")
    pos += 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos) if len(data) - pos >= w * h else None
    if raw is None:
        raise ImageFormatError(f"{path}: truncated PGM payload")
    return raw.reshape(h, w).copy()


def write_pgm(path, image):
    im = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = im.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + im.tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise ImageFormatError(f"{path}: Pillow is needed for {path.suffix} images") from None
    with Image.open(path) as im:
        return to_gray(np.asarray(im.convert("RGB")))


# -- boxes and datasets ------------------------------------------------------

def derive_box(shape, margin=0.0) -> FaceBox:
    """Tight landmark bounding box grown by ``margin`` of its size on every side."""
    s = as_shape(shape)
    lo = s.min(axis=0)
    hi = s.max(axis=0)
    size = hi - lo
    if not (size[0] > 0 and size[1] > 0):
        raise DegenerateInputError("landmarks span zero area")
    return FaceBox(lo[0] - margin * size[0], lo[1] - margin * size[1],
                   size[0] * (1 + 2 * margin), size[1] * (1 + 2 * margin))


def read_box(path) -> FaceBox:
    parts = Path(path).read_text().split()
    try:
        values = [float(p) for p in parts]
    except ValueError:
        values = []
    if len(values) != 4:
        raise DataError(f"{path}: box file must hold four numbers 'x y w h'")
    return FaceBox(*values)


def write_box(path, box: FaceBox):
    Path(path).write_text(f"{box.x:.6f} {box.y:.6f} {box.w:.6f} {box.h:.6f}\n")


def read_index(path) -> list:
    return [s.strip() for s in Path(path).read_text().splitlines() if s.strip()]


def _parse_ints(value):
    return tuple(int(v) for v in re.split(r"[,\s]+", value.strip()) if v)


def read_meta(root) -> DatasetMeta:
    path = Path(root) / META_FILE
    meta = DatasetMeta()
    if not path.exists():
        return meta
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        try:
            if key == "iod":
                meta.iod = _parse_ints(value)
            elif key == "mirror_map":
                meta.mirror_map = _parse_ints(value)
        except ValueError:
            raise ConfigError(f"{path}:{n}: expected integers for {key}") from None
    return meta


def write_meta(root, meta: DatasetMeta):
    lines = ["# dataset metadata"]
    if meta.iod is not None:
        lines.append("iod = " + ",".join(map(str, meta.iod)))
    if meta.mirror_map is not None:
        lines.append("mirror_map = " + ",".join(map(str, meta.mirror_map)))
    (Path(root) / META_FILE).write_text("\n".join(lines) + "\n")


def load_dataset(root, stems=None, box_margin=0.1) -> list:
    """Samples sorted by stem; ``stems`` restricts to an index list."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    images = {}
    for p in root.iterdir():
        if p.suffix.lower() in IMAGE_SUFFIXES and p.with_suffix(".pts").exists():
            images.setdefault(p.stem, p)
    if stems is not None:
        missing = [s for s in stems if s not in images]
        if missing:
            raise DataError(f"{len(missing)} indexed stems missing from {root}, e.g. {missing[0]!r}")
        chosen = sorted(set(stems))
    else:
        chosen = sorted(images)
    samples = []
    n_points = None
    for stem in chosen:
        img_path = images[stem]
        shape = load_landmarks(img_path.with_suffix(".pts"))
        if n_points is None:
            n_points = len(shape)
        elif len(shape) != n_points:
            raise DataError(f"{stem}: {len(shape)} landmarks, dataset has {n_points}")
        box_path = img_path.with_suffix(".box")
        box = read_box(box_path) if box_path.exists() else derive_box(shape, box_margin)
        samples.append(Sample(read_image(img_path), box, shape, source=stem))
    if not samples:
        raise DataError(f"no annotated images in {root}")
    return samples


def save_dataset(samples, root, meta: DatasetMeta | None = None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(samples))))
    stems = []
    for i, s in enumerate(samples):
        stem = s.source or f"{i:0{width}d}"
        write_pgm(root / f"{stem}.pgm", s.image)
        save_landmarks(root / f"{stem}.pts", s.shape)
        write_box(root / f"{stem}.box", s.box)
        stems.append(stem)
    if meta is not None:
        write_meta(root, meta)
    return stems


def split(samples, fractions, seed=0) -> list:
    """Deterministic shuffle, then consecutive partitions of the given fractions."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    n = len(samples)
    if len(fractions) == 1:
        return [list(samples)]
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.rint(np.cumsum([0.0] + fractions) * n).astype(int)
    bounds[-1] = n
    return [[samples[i] for i in order[a:b]] for a, b in zip(bounds[:-1], bounds[1:])]


# -- synthetic benchmark -----------------------------------------------------

@dataclass
class SyntheticSpec:
    n_landmarks: int = 10
    image_size: int = 96
    count: int = 100
    seed: int = 0
    noise: float = 2.0            # pixel noise std
    box_size: tuple = (52.0, 68.0)
    rotation: float = 12.0        # degrees, uniform +-
    scale: tuple = (0.9, 1.1)
    shift: float = 0.06           # box-frame units, uniform +-
    jitter: float = 0.01          # per-point std, box-frame units
    blob_sigma: float = 0.04      # box-frame units
    texture: float = 20.0


@dataclass(frozen=True)
class Template:
    points: np.ndarray
    mirror_map: tuple
    iod: tuple
    intensities: np.ndarray = field(repr=False)


def synthetic_template(n_landmarks) -> Template:
    """Left/right symmetric layout with distinct blob intensities.

    Landmarks ``2j`` and ``2j + 1`` mirror each other; for odd counts the
    last one sits on the midline. The first pair is the eye-corner pair.
    """
    if n_landmarks < 2:
        raise DataError("synthetic faces need at least two landmarks")
    rng = np.random.default_rng(20170 + n_landmarks)
    n_pairs = n_landmarks // 2
    ys = np.linspace(0.22, 0.8, n_pairs) if n_pairs > 1 else np.array([0.3])
    half = rng.uniform(0.1, 0.3, n_pairs)
    half[0] = 0.3
    pts = []
    for y, a in zip(ys, half):
        pts += [(0.5 - a, y), (0.5 + a, y)]
    perm = [j ^ 1 for j in range(2 * n_pairs)]
    if n_landmarks % 2:
        pts.append((0.5, 0.5 * (ys[0] + ys[-1]) if n_pairs > 1 else 0.6))
        perm.append(n_landmarks - 1)
    intensities = 90.0 + 110.0 * rng.permutation(n_landmarks) / max(1, n_landmarks - 1)
    return Template(np.array(pts), tuple(perm), (0, 1), intensities)


def _texture(rng, size, amplitude):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    field_ = np.zeros((size, size))
    for _ in range(3):
        f = rng.uniform(0.05, 0.25)
        t = rng.uniform(0, np.pi)
        ph = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(f * (xs * np.cos(t) + ys * np.sin(t)) + ph)
    return amplitude / 3 * field_


def render_face(points_px, intensities, sigma_px, size, rng, texture, noise):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 50.0 + _texture(rng, size, texture)
    for (x, y), a in zip(points_px, intensities):
        img += a * np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma_px**2))
    if noise > 0:
        img += rng.normal(0, noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec):
    """Render ``spec.count`` faces from random similarity deformations of a template.

    Returns ``(samples, meta)``; ground truth is exact.
    """
    if spec.count < 1:
        raise DataError("count must be at least 1")
    tpl = synthetic_template(spec.n_landmarks)
    rng = np.random.default_rng(spec.seed)
    samples = []
    size = spec.image_size
    width = max(4, len(str(spec.count)))
    for i in range(spec.count):
        bw = rng.uniform(*spec.box_size)
        cx = size / 2 + rng.uniform(-0.05, 0.05) * size
        cy = size / 2 + rng.uniform(-0.05, 0.05) * size
        box = FaceBox(cx - bw / 2, cy - bw / 2, bw, bw)
        t = np.deg2rad(rng.uniform(-spec.rotation, spec.rotation))
        s = rng.uniform(*spec.scale)
        rot = s * np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
        shift = rng.uniform(-spec.shift, spec.shift, 2)
        pts = (tpl.points - 0.5) @ rot.T + 0.5 + shift
        pts = pts + rng.normal(0, spec.jitter, pts.shape)
        pts = np.clip(pts, 0.02, 0.98)
        px = np.column_stack([box.x + pts[:, 0] * box.w, box.y + pts[:, 1] * box.h])
        px = np.clip(px, 0, size - 1)
        img = render_face(px, tpl.intensities, spec.blob_sigma * bw, size, rng, spec.texture, spec.noise)
        samples.append(Sample(img, box, px, source=f"synth{i:0{width}d}"))
    return samples, DatasetMeta(iod=tpl.iod, mirror_map=tpl.mirror_map)


def with_shape(sample: Sample, shape) -> Sample:
    return replace(sample, shape=as_shape(shape))


def validate_meta(meta: DatasetMeta, n_landmarks):
    if meta.mirror_map is not None:
        check_mirror_map(meta.mirror_map, n_landmarks)
    if meta.iod is not None:
        if len(meta.iod) != 2 or not all(0 <= i < n_landmarks for i in meta.iod):
            raise DataError(f"iod indices {meta.iod} invalid for {n_landmarks} landmarks")
