import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modelgen import random_inputs, random_model
from tcsc import modelio
from tcsc.cascade import predict
from tcsc.errors import (BadMagicError, CRCMismatchError, DimensionMismatchError, ModelFormatError,
                         UnsupportedVersionError)
from tcsc.geometry import FaceBox
from tcsc.quantizer import memory_report

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = ["ll_q0", "ll_q4", "rrr_q0", "rrr_q3", "rrrbp_q8", "nn_q0", "nn_q2"]


def predictions(model, inputs, p=1, seed=0):
    return np.stack([predict(model, im, FaceBox(*b), p, np.random.default_rng(seed)) for im, b in inputs])


def with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


# -- round trips -------------------------------------------------------------

def test_trained_model_round_trip(tiny_models, tmp_path, rng):
    inputs = random_inputs(rng, 100, size=(64, 64))
    for kind, (model, _) in tiny_models.items():
        path = tmp_path / f"{kind}.tcsc"
        nbytes = modelio.save(model, path)
        assert nbytes == path.stat().st_size
        back = modelio.load(path)
        assert back.kind == kind and back.iod == model.iod and back.mirror_map == model.mirror_map
        assert np.array_equal(predictions(back, inputs), predictions(model, inputs))


@pytest.mark.parametrize("kind", ["ll", "rrr", "rrrbp", "nn"])
@pytest.mark.parametrize("q", [None, 2, 5, 8])
def test_random_model_round_trip(kind, q, rng):
    model = random_model(kind, rng, q=q)
    data = modelio.to_bytes(model)
    back = modelio.from_bytes(data)
    assert modelio.to_bytes(back) == data
    assert back.q == q and back.r_schedule == model.r_schedule
    inputs = random_inputs(rng, 10)
    assert np.array_equal(predictions(back, inputs, p=3), predictions(model, inputs, p=3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["ll", "rrr", "rrrbp", "nn"]),
       st.integers(1, 4), st.integers(1, 3), st.integers(1, 4), st.booleans())
def test_serialization_is_total(seed, kind, L, n, d, mirror):
    rng = np.random.default_rng(seed)
    L = max(L, 1)
    rs = tuple(int(x) for x in rng.integers(1, 2 * L, size=int(rng.integers(1, 4))))
    model = random_model(kind, rng, L=L, n=n, d=d, r_schedule=rs, mirror=mirror)
    data = modelio.to_bytes(model)
    assert len(data) == modelio.expected_file_size(model)
    assert modelio.to_bytes(modelio.from_bytes(data)) == data


def test_save_is_deterministic(tiny_models, tmp_path):
    model = tiny_models["nn"][0]
    modelio.save(model, tmp_path / "a.tcsc")
    modelio.save(model, tmp_path / "b.tcsc")
    assert (tmp_path / "a.tcsc").read_bytes() == (tmp_path / "b.tcsc").read_bytes()


def test_forest_blob_round_trip_is_byte_identical(rng):
    model = random_model("rrr", rng, L=4, n=3, d=4)
    back = modelio.from_bytes(modelio.to_bytes(model))
    for a, b in zip(model.stages, back.stages):
        assert modelio._pack_forest(a.forest) == modelio._pack_forest(b.forest)
        assert np.array_equal(a.forest.codes, b.forest.codes)
        assert np.array_equal(a.forest.thresholds, b.forest.thresholds)
        assert a.forest.radius == b.forest.radius


def test_forest_blob_size(rng):
    forest = random_model("ll", rng, L=2, n=3, d=3, r_schedule=(1,)).stages[0].forest
    assert len(modelio._pack_forest(forest)) == 4 + 6 * 7 * 6


# -- sizes -------------------------------------------------------------------

@pytest.mark.parametrize("q", [None, 2, 3, 4, 6, 8])
def test_saved_size_is_memory_report_plus_header(q, rng):
    model = random_model("rrr", rng, L=5, n=2, d=3, r_schedule=(3, 4, 6), q=q)
    size = len(modelio.to_bytes(model))
    assert size == memory_report(model).total + modelio.header_nbytes(5, 3)
    assert modelio.header_nbytes(5, 3) == 20 + 2 * 3 + 10 * 5 + 4


# -- header layout -----------------------------------------------------------

def test_header_fields_little_endian(rng):
    model = random_model("rrrbp", rng, L=3, n=2, d=2, r_schedule=(2, 5), q=6)
    data = modelio.to_bytes(model)
    assert data[:4] == b"TCSC"
    version, L, n = struct.unpack_from("<HHH", data, 4)
    d, T, kind, q, flags, reserved = data[10:16]
    iod = struct.unpack_from("<HH", data, 16)
    assert (version, L, n, d, T, kind, q, flags, reserved, iod) == (1, 3, 2, 2, 2, 2, 6, 1, 0, (0, 2))
    assert struct.unpack_from("<2H", data, 20) == (2, 5)
    assert struct.unpack_from("<3H", data, 24) == (2, 1, 0)
    mean = np.frombuffer(data, "<f4", 6, 30).reshape(3, 2)
    assert np.array_equal(mean, model.mean_shape.astype(np.float32))
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_absent_mirror_map(rng):
    model = random_model("ll", rng, mirror=False)
    data = modelio.to_bytes(model)
    assert data[14] == 0
    assert modelio.from_bytes(data).mirror_map is None


# -- errors --------------------------------------------------------------------

def test_flipped_payload_byte_fails_crc(rng):
    data = bytearray(modelio.to_bytes(random_model("nn", rng)))
    for pos in (40, len(data) // 2, len(data) - 5):
        bad = data.copy()
        bad[pos] ^= 0x01
        with pytest.raises(CRCMismatchError):
            modelio.from_bytes(bytes(bad))


def test_bad_magic(rng):
    data = modelio.to_bytes(random_model("ll", rng))
    with pytest.raises(BadMagicError):
        modelio.from_bytes(b"XCSC" + data[4:])
    with pytest.raises(BadMagicError):
        modelio.from_bytes(b"TC")


def test_unsupported_version(rng):
    data = modelio.to_bytes(random_model("ll", rng))
    body = data[:4] + struct.pack("<H", 2) + data[6:-4]
    with pytest.raises(UnsupportedVersionError):
        modelio.from_bytes(with_crc(body))


def test_dimension_mismatch_with_valid_crc(rng):
    data = modelio.to_bytes(random_model("rrr", rng))
    body = data[:-4]
    with pytest.raises(DimensionMismatchError):
        modelio.from_bytes(with_crc(body[:-3]))
    with pytest.raises(DimensionMismatchError):
        modelio.from_bytes(with_crc(body + b"\0" * 8))
    # claims an extra stage
    grown = bytearray(body)
    grown[11] += 1
    with pytest.raises(DimensionMismatchError):
        modelio.from_bytes(with_crc(bytes(grown)))
    # unknown decoder kind
    odd = bytearray(body)
    odd[12] = 9
    with pytest.raises(DimensionMismatchError):
        modelio.from_bytes(with_crc(bytes(odd)))


def test_errors_are_distinct():
    kinds = {BadMagicError, UnsupportedVersionError, CRCMismatchError, DimensionMismatchError}
    assert all(issubclass(k, ModelFormatError) for k in kinds)
    assert all(not issubclass(a, b) for a in kinds for b in kinds if a is not b)


# -- inspect -----------------------------------------------------------------

def test_inspect_quantized_rrr(tmp_path, rng):
    model = random_model("rrr", rng, L=4, r_schedule=(2, 3, 5), q=4)
    modelio.save(model, tmp_path / "m.tcsc")
    info = modelio.inspect(tmp_path / "m.tcsc")
    assert info["q"] == 4 and info["r_schedule"] == [2, 3, 5] and info["decoder"] == "rrr"
    b = info["bytes"]
    assert b["header"] + b["forests"] + b["decoders"] == b["file"]
    text = modelio.format_inspect(info)
    assert "q: 4" in text and "r_schedule: [2, 3, 5]" in text


def test_inspect_ll_reports_no_quantization(tmp_path, rng):
    modelio.save(random_model("ll", rng), tmp_path / "m.tcsc")
    info = modelio.inspect(tmp_path / "m.tcsc")
    assert info["q"] == "none" and info["r_schedule"] == []
    b = info["bytes"]
    assert b["header"] + b["forests"] + b["decoders"] == b["file"]


def test_inspect_header_errors(tmp_path):
    (tmp_path / "x.tcsc").write_bytes(b"nope")
    with pytest.raises(BadMagicError):
        modelio.inspect(tmp_path / "x.tcsc")
    with pytest.raises(DimensionMismatchError):
        modelio.inspect(FIXTURES / "truncated.tcsc")


def test_model_validation_error_is_a_format_error(rng):
    # a map that is not an involution loads as a header but not as a model
    model = random_model("ll", rng, L=3)
    data = bytearray(modelio.to_bytes(model)[:-4])
    struct.pack_into("<3H", data, 20 + 2 * 2, 1, 2, 0)
    with pytest.raises(ModelFormatError):
        modelio.from_bytes(with_crc(bytes(data)))


# -- golden fixtures -----------------------------------------------------------

@pytest.mark.parametrize("name", GOLDEN)
def test_golden_fixture_predictions(name):
    inputs = np.load(FIXTURES / "inputs.npz")
    pairs = list(zip(inputs["images"], inputs["boxes"]))
    model = modelio.load(FIXTURES / f"{name}.tcsc")
    expect = np.load(FIXTURES / f"{name}_pred.npy")
    assert np.array_equal(predictions(model, pairs), expect)
    # re-serializing reproduces the committed bytes
    assert modelio.to_bytes(model) == (FIXTURES / f"{name}.tcsc").read_bytes()


def test_golden_fixture_metadata():
    info = modelio.inspect(FIXTURES / "rrr_q3.tcsc")
    assert (info["landmarks"], info["trees_per_landmark"], info["depth"], info["stages"]) == (3, 2, 2, 2)
    assert info["q"] == 3 and info["r_schedule"] == [2, 3] and info["mirror_map"]
    assert modelio.inspect(FIXTURES / "nn_q0.tcsc")["mirror_map"] is False


@pytest.mark.parametrize("name,err", [("corrupt_payload", CRCMismatchError), ("corrupt_crc", CRCMismatchError),
                                      ("truncated", CRCMismatchError)])
def test_corrupted_fixtures(name, err):
    with pytest.raises(err):
        modelio.load(FIXTURES / f"{name}.tcsc")
