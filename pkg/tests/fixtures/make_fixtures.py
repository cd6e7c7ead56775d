"""Regenerate the golden model files.

Run from the repository root::

    python3 tests/fixtures/make_fixtures.py

The files are committed; tests compare against them, so only rerun this
after a deliberate format change (and bump the format version).
"""
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

from modelgen import random_inputs, random_model  # noqa: E402
from tcsc import modelio  # noqa: E402
from tcsc.cascade import predict  # noqa: E402
from tcsc.geometry import FaceBox  # noqa: E402

CASES = [("ll", None), ("ll", 4), ("rrr", None), ("rrr", 3), ("rrrbp", 8), ("nn", None), ("nn", 2)]


def name(kind, q):
    return f"{kind}_q{q or 0}"


def main():
    rng = np.random.default_rng(20240611)
    inputs = random_inputs(rng, 12)
    np.savez(HERE / "inputs.npz", images=np.stack([im for im, _ in inputs]),
             boxes=np.array([b for _, b in inputs]))
    for kind, q in CASES:
        model = random_model(kind, rng, q=q, mirror=kind != "nn")
        path = HERE / f"{name(kind, q)}.tcsc"
        modelio.save(model, path)
        model = modelio.load(path)
        preds = np.stack([predict(model, im, FaceBox(*b), 1) for im, b in inputs])
        np.save(HERE / f"{name(kind, q)}_pred.npy", preds)

    good = (HERE / "rrr_q3.tcsc").read_bytes()
    flipped = bytearray(good)
    flipped[len(good) // 2] ^= 0x10
    (HERE / "corrupt_payload.tcsc").write_bytes(bytes(flipped))
    crc = bytearray(good)
    crc[-1] ^= 0x01
    (HERE / "corrupt_crc.tcsc").write_bytes(bytes(crc))
    (HERE / "truncated.tcsc").write_bytes(good[:-9])


if __name__ == "__main__":
    main()
