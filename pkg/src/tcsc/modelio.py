"""Binary model files.

Layout, all little-endian::

    header   magic "TCSC", u16 version, u16 L, u16 n, u8 d, u8 T, u8 kind,
             u8 q (0 = float32), u8 flags (bit 0: mirror map present),
             u8 reserved, u16 iod_a, u16 iod_b
             T x u16 bottleneck sizes (0 for ll)
             L x u16 mirror map (identity when absent)
             2L x f32 mean shape
    stage    f32 radius, then per internal node 4 x i8 offset codes + i16 threshold
             decoder matrices in order W | W1 [W2 [W3 b1 b2 b3]];
             a quantized matrix is its codebooks (rows x 2^q f32) then the
             packed index payload
    trailer  u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .cascade import CascadeModel, Stage
from .decoders import LinearDecoder, NeuralDecoder, ReducedRankDecoder
from .ensemble import NODE_BYTES, Forest, forest_nbytes
from .errors import (BadMagicError, CRCMismatchError, DimensionMismatchError, ModelFormatError,
                     UnsupportedVersionError)
from .quantizer import QuantizedMatrix, codebook_nbytes, is_quantized, memory_report, payload_nbytes

MAGIC = b"TCSC"
VERSION = 1
KIND_CODES = {"ll": 0, "rrr": 1, "rrrbp": 2, "nn": 3}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
_HEAD = struct.Struct("<4sHHHBBBBBBHH")
_CRC = struct.Struct("<I")
NODE_DTYPE = np.dtype([("u", "i1", (4,)), ("t", "<i2")])
assert NODE_DTYPE.itemsize == NODE_BYTES


def header_nbytes(n_landmarks, n_stages) -> int:
    """Bytes outside the per-stage blobs, CRC included."""
    return _HEAD.size + 2 * n_stages + 2 * n_landmarks + 8 * n_landmarks + _CRC.size


def matrix_shapes(kind, L, n, d, r):
    o = 2 * L
    p = L * n * (1 << d)
    if kind == "ll":
        return [("W", (o, p))]
    if kind in ("rrr", "rrrbp"):
        return [("W1", (r, p)), ("W2", (o, r))]
    return [("W1", (r, p)), ("W2", (2 * r, r)), ("W3", (o, 2 * r)),
            ("b1", (r,)), ("b2", (2 * r,)), ("b3", (o,))]


def _matrix_nbytes(shape, q, first):
    if first and q:
        return codebook_nbytes(shape[0], q) + payload_nbytes(shape[0], shape[1], q)
    return int(np.prod(shape)) * 4


def _stage_nbytes(kind, L, n, d, r, q):
    forest = 4 + L * n * ((1 << d) - 1) * NODE_BYTES
    shapes = matrix_shapes(kind, L, n, d, r)
    return forest, sum(_matrix_nbytes(s, q, i == 0) for i, (_, s) in enumerate(shapes))


def _pack_forest(forest: Forest) -> bytes:
    nodes = np.empty(forest.codes.shape[:2], dtype=NODE_DTYPE)
    nodes["u"] = forest.codes
    nodes["t"] = forest.thresholds
    return struct.pack("<f", forest.radius) + nodes.tobytes()


def _pack_matrix(m) -> bytes:
    if is_quantized(m):
        return m.codebooks.astype("<f4").tobytes() + m.packed.tobytes()
    return np.ascontiguousarray(m, dtype="<f4").tobytes()


def to_bytes(model: CascadeModel) -> bytes:
    f0 = model.stages[0].forest
    L, T = model.n_landmarks, len(model.stages)
    mirror = model.mirror_map
    flags = 1 if mirror is not None else 0
    parts = [_HEAD.pack(MAGIC, VERSION, L, f0.n_per_landmark, f0.depth, T,
                        KIND_CODES[model.kind], model.q or 0, flags, 0,
                        model.iod[0], model.iod[1])]
    rs = model.r_schedule or (0,) * T
    parts.append(np.asarray(rs, dtype="<u2").tobytes())
    parts.append(np.asarray(mirror if mirror is not None else range(L), dtype="<u2").tobytes())
    parts.append(model.mean_shape.astype("<f4").tobytes())
    for stage in model.stages:
        parts.append(_pack_forest(stage.forest))
        parts.extend(_pack_matrix(m) for m in stage.decoder.matrices().values())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def save(model: CascadeModel, path) -> int:
    data = to_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def _parse_header(data: bytes, file_size: int):
    if len(data) < _HEAD.size or data[:4] != MAGIC:
        raise BadMagicError("not a TCSC model file")
    magic, version, L, n, d, T, kind, q, flags, _, iod_a, iod_b = _HEAD.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"model format version {version} is not supported")
    if kind not in KIND_NAMES:
        raise DimensionMismatchError(f"unknown decoder kind code {kind}")
    if L < 1 or n < 1 or not 1 <= d <= 15 or T < 1:
        raise DimensionMismatchError("header dimensions out of range")
    if q and not 2 <= q <= 8:
        raise DimensionMismatchError(f"quantization bits {q} out of range")
    if iod_a >= L or iod_b >= L:
        raise DimensionMismatchError("IOD landmark index out of range")
    head_end = _HEAD.size + 2 * T + 2 * L + 8 * L
    if len(data) < head_end:
        raise DimensionMismatchError("file shorter than its header")
    pos = _HEAD.size
    rs = np.frombuffer(data, "<u2", T, pos).astype(int)
    pos += 2 * T
    mirror = np.frombuffer(data, "<u2", L, pos).astype(int)
    pos += 2 * L
    kind_name = KIND_NAMES[kind]
    if kind_name != "ll" and any(not 1 <= r < 2 * L for r in rs):
        raise DimensionMismatchError("bottleneck size out of range")
    sizes = [_stage_nbytes(kind_name, L, n, d, int(r), q) for r in rs]
    expect = head_end + sum(a + b for a, b in sizes) + _CRC.size
    if file_size != expect:
        raise DimensionMismatchError(f"file holds {file_size} bytes, header implies {expect}")
    return {
        "version": version, "L": L, "n": n, "d": d, "T": T, "kind": kind_name,
        "q": q or None, "iod": (iod_a, iod_b), "r_schedule": tuple(int(r) for r in rs),
        "mirror_map": tuple(int(i) for i in mirror) if flags & 1 else None,
        "mean_offset": pos, "stage_offset": head_end, "stage_sizes": sizes,
    }


def from_bytes(data: bytes) -> CascadeModel:
    if len(data) < _HEAD.size or data[:4] != MAGIC:
        raise BadMagicError("not a TCSC model file")
    version = struct.unpack_from("<H", data, 4)[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"model format version {version} is not supported")
    if len(data) < _HEAD.size + _CRC.size:
        raise DimensionMismatchError("truncated model file")
    body, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise CRCMismatchError("model file checksum mismatch")
    h = _parse_header(data, len(data))
    L, n, d, q, kind = h["L"], h["n"], h["d"], h["q"], h["kind"]
    mean = np.frombuffer(data, "<f4", 2 * L, h["mean_offset"]).reshape(L, 2).astype(np.float32)
    pos = h["stage_offset"]
    n_nodes = (1 << d) - 1
    stages = []
    for r in h["r_schedule"]:
        (radius,) = struct.unpack_from("<f", data, pos)
        nodes = np.frombuffer(data, NODE_DTYPE, L * n * n_nodes, pos + 4).reshape(L * n, n_nodes)
        forest = Forest(d, n, L, radius, nodes["u"].copy(), nodes["t"].astype(np.int16))
        pos += forest_nbytes(forest)
        mats = {}
        for i, (name, shape) in enumerate(matrix_shapes(kind, L, n, d, r)):
            if i == 0 and q:
                rows, cols = shape
                cb = np.frombuffer(data, "<f4", rows << q, pos).reshape(rows, 1 << q)
                pos += cb.nbytes
                nb = payload_nbytes(rows, cols, q)
                packed = np.frombuffer(data, np.uint8, nb, pos).copy()
                pos += nb
                mats[name] = QuantizedMatrix(rows, cols, q, cb.astype(np.float32), packed)
            else:
                count = int(np.prod(shape))
                mats[name] = np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(np.float32)
                pos += 4 * count
        if kind == "ll":
            dec = LinearDecoder(mats["W"])
        elif kind in ("rrr", "rrrbp"):
            dec = ReducedRankDecoder(mats["W1"], mats["W2"], backprop=kind == "rrrbp")
        else:
            dec = NeuralDecoder(**mats)
        stages.append(Stage(forest, dec))
    try:
        return CascadeModel(mean, stages, h["iod"], h["mirror_map"])
    except Exception as exc:
        raise ModelFormatError(f"inconsistent model: {exc}") from exc


def load(path) -> CascadeModel:
    return from_bytes(Path(path).read_bytes())


def inspect(path) -> dict:
    """Header fields and section sizes, read without touching weight payloads."""
    path = Path(path)
    size = path.stat().st_size
    with path.open("rb") as fh:
        head = fh.read(_HEAD.size)
        if len(head) == _HEAD.size:
            _, _, L, _, _, T = struct.unpack_from("<4sHHHBB", head)
            head += fh.read(2 * T + 2 * L + 8 * L)
    h = _parse_header(head, size)
    forest = sum(a for a, _ in h["stage_sizes"])
    dec = sum(b for _, b in h["stage_sizes"])
    return {
        "path": str(path), "version": h["version"], "landmarks": h["L"],
        "trees_per_landmark": h["n"], "depth": h["d"], "stages": h["T"],
        "decoder": h["kind"], "q": h["q"] if h["q"] else "none",
        "r_schedule": list(h["r_schedule"]) if h["kind"] != "ll" else [],
        "iod": list(h["iod"]), "mirror_map": h["mirror_map"] is not None,
        "bytes": {"header": header_nbytes(h["L"], h["T"]), "forests": forest,
                  "decoders": dec, "file": size},
    }


def format_inspect(info: dict) -> str:
    lines = [f"{k}: {v}" for k, v in info.items() if k != "bytes"]
    lines += [f"bytes.{k}: {v}" for k, v in info["bytes"].items()]
    return "\n".join(lines)


def expected_file_size(model: CascadeModel) -> int:
    return memory_report(model).total + header_nbytes(model.n_landmarks, len(model.stages))
