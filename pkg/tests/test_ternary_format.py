"""Packing and model-container tests: bit layout, round trips, corruption, errors."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ternlm.config import TransformerConfig
from ternlm.errors import (
    BadMagicError,
    CorruptDataError,
    DimensionError,
    DuplicateTensorError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from ternlm.ternary_format import (
    MAGIC,
    ModelFile,
    TensorRecord,
    TernaryTensor,
    load_model,
    pack,
    packed_row_bytes,
    read_model,
    save_model,
    unpack,
    write_model,
)

CFG = TransformerConfig(hidden=8, layers=1, heads=2, ffn_dim=16, max_seq=8)


# ---------------------------------------------------------------------------
# pack / unpack
# ---------------------------------------------------------------------------

def test_pack_bit_layout_example():
    t = pack(np.array([[0, 1, -1, 0]]))
    assert t.packed == bytes([0x24])  # fields 00|10|01|00, little-endian in the byte


def test_pack_zero_row():
    assert pack(np.zeros((1, 4), dtype=np.int8)).packed == bytes([0x00])


def test_pack_single_column_with_padding():
    t = pack(np.array([[1]]))
    assert t.packed == bytes([0x01])
    assert t.rows == 1 and t.cols == 1


def test_pack_rows_are_byte_aligned():
    t = pack(np.array([[1, -1, 0, 1, 1], [0, 0, 0, 0, -1]]))
    assert len(t.packed) == 2 * packed_row_bytes(5) == 4


def test_pack_rejects_bad_alphabet():
    with pytest.raises(ValidationError):
        pack(np.array([[0, 2]]))
    with pytest.raises(DimensionError):
        pack(np.zeros((0, 4), dtype=np.int8))


def test_unpack_examples():
    t = TernaryTensor(rows=1, cols=4, gamma=1.0, packed=bytes([0x24]))
    assert unpack(t).tolist() == [[0, 1, -1, 0]]
    t = TernaryTensor(rows=2, cols=4, gamma=1.0, packed=bytes([0, 0]))
    assert not unpack(t).any()


def test_unpack_detects_reserved_field_with_location():
    # 0b11 in field 2 of row 0
    t = TernaryTensor(rows=1, cols=4, gamma=1.0, packed=bytes([0b00110000]))
    with pytest.raises(CorruptDataError, match=r"row 0, column 2"):
        unpack(t)


def test_unpack_detects_nonzero_padding():
    # cols=2: fields 2,3 of the byte are padding; set field 3 to 0b01
    t = TernaryTensor(rows=1, cols=2, gamma=1.0, packed=bytes([0b01000000]))
    with pytest.raises(CorruptDataError):
        unpack(t)


@settings(max_examples=100, deadline=None)
@given(
    hnp.arrays(
        np.int8,
        hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=16),
        elements=st.sampled_from([-1, 0, 1]),
    )
)
def test_pack_unpack_round_trip_property(codes):
    assert np.array_equal(unpack(pack(codes)), codes)


def test_storage_size_is_quarter_byte_per_weight():
    for n, m in [(3, 4), (7, 64), (1, 1), (5, 17)]:
        t = pack(np.zeros((n, m), dtype=np.int8))
        assert len(t.packed) == n * ((m + 3) // 4)
    # exactly 8x smaller than fp16 whenever cols is a multiple of 4
    t = pack(np.zeros((16, 64), dtype=np.int8))
    assert 16 * 64 * 2 == 8 * len(t.packed)


def test_ternary_tensor_validates_buffer_length():
    with pytest.raises(DimensionError):
        TernaryTensor(rows=2, cols=4, gamma=1.0, packed=bytes([0]))
    with pytest.raises(ValidationError):
        TernaryTensor(rows=1, cols=4, gamma=-1.0, packed=bytes([0]))


# ---------------------------------------------------------------------------
# tensor records
# ---------------------------------------------------------------------------

def test_record_scale_presence_rules():
    with pytest.raises(ValidationError):
        TensorRecord(name="w", dtype="F32", dims=(2,), payload=bytes(8), scale=1.0)
    with pytest.raises(ValidationError):
        TensorRecord(name="w", dtype="TERNARY_PACKED", dims=(1, 4), payload=bytes(1))


def test_record_payload_length_checked():
    with pytest.raises(DimensionError):
        TensorRecord(name="w", dtype="F32", dims=(3,), payload=bytes(8))


def test_record_f32_round_trip():
    arr = np.array([[1.5, -2.25], [0.0, 3.0]])
    rec = TensorRecord.from_f32("w", arr)
    assert np.array_equal(rec.to_f32(), arr)


def test_record_i8_round_trip():
    arr = np.array([[-128, 127], [0, 5]], dtype=np.int8)
    rec = TensorRecord.from_i8("codes", arr)
    assert np.array_equal(rec.to_i8(), arr)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

def _round_trip(model: ModelFile) -> ModelFile:
    buf = io.BytesIO()
    n = write_model(model, buf)
    assert n == len(buf.getvalue())
    buf.seek(0)
    return read_model(buf)


def test_empty_tensor_list_round_trips():
    back = _round_trip(ModelFile(config=CFG, tensors=()))
    assert back.config == CFG
    assert back.tensors == ()


def test_mixed_tensor_round_trip_bit_identical():
    rng = np.random.default_rng(0)
    tern = pack(rng.integers(-1, 2, size=(6, 10)).astype(np.int8), gamma=0.375)
    model = ModelFile(
        config=CFG,
        tensors=(
            TensorRecord.from_ternary("w_packed", tern),
            TensorRecord.from_f32("w_float", rng.normal(size=(4, 3))),
            TensorRecord.from_i8("w_int", rng.integers(-128, 128, size=(5,)).astype(np.int8)),
        ),
    )
    back = _round_trip(model)
    assert back.names() == ["w_packed", "w_float", "w_int"]
    for a, b in zip(model.tensors, back.tensors):
        assert a.payload == b.payload
        assert a.dims == b.dims and a.dtype == b.dtype and a.scale == b.scale
    t = back.tensor("w_packed").to_ternary()
    assert t.gamma == 0.375
    assert np.array_equal(unpack(t), unpack(tern))


def test_write_is_little_endian_with_magic_header():
    buf = io.BytesIO()
    write_model(ModelFile(config=CFG, tensors=()), buf)
    raw = buf.getvalue()
    assert raw[:4] == b"B158" == MAGIC
    assert struct.unpack("<I", raw[4:8]) == (1,)
    (cfg_len,) = struct.unpack("<I", raw[8:12])
    assert raw[12 : 12 + cfg_len].decode("utf-8") == CFG.to_json()
    assert struct.unpack("<I", raw[12 + cfg_len : 16 + cfg_len]) == (0,)
    assert len(raw) == 16 + cfg_len


def test_bad_magic_rejected():
    buf = io.BytesIO()
    write_model(ModelFile(config=CFG, tensors=()), buf)
    raw = bytearray(buf.getvalue())
    raw[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        read_model(io.BytesIO(bytes(raw)))


def test_unsupported_version_rejected():
    buf = io.BytesIO()
    write_model(ModelFile(config=CFG, tensors=()), buf)
    raw = bytearray(buf.getvalue())
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError):
        read_model(io.BytesIO(bytes(raw)))


def test_truncated_payload_rejected():
    model = ModelFile(
        config=CFG, tensors=(TensorRecord.from_f32("w", np.ones((4, 4))),)
    )
    buf = io.BytesIO()
    write_model(model, buf)
    raw = buf.getvalue()
    for cut in (len(raw) - 1, len(raw) - 30, 10, 5):
        with pytest.raises(TruncatedFileError):
            read_model(io.BytesIO(raw[:cut]))


def test_duplicate_tensor_names_rejected_on_construction():
    rec = TensorRecord.from_f32("w", np.ones((2,)))
    with pytest.raises(DuplicateTensorError):
        ModelFile(config=CFG, tensors=(rec, rec))


def test_duplicate_tensor_names_rejected_on_read():
    model = ModelFile(
        config=CFG,
        tensors=(
            TensorRecord.from_f32("a", np.ones((2,))),
            TensorRecord.from_f32("b", np.ones((2,))),
        ),
    )
    buf = io.BytesIO()
    write_model(model, buf)
    raw = bytearray(buf.getvalue())
    idx = raw.rindex(b"b")
    raw[idx : idx + 1] = b"a"
    with pytest.raises(DuplicateTensorError):
        read_model(io.BytesIO(bytes(raw)))


def test_corrupt_ternary_payload_detected_after_read():
    tern = pack(np.array([[1, -1, 0, 1]], dtype=np.int8), gamma=1.0)
    model = ModelFile(config=CFG, tensors=(TensorRecord.from_ternary("w", tern),))
    buf = io.BytesIO()
    write_model(model, buf)
    raw = bytearray(buf.getvalue())
    raw[-1] = 0xFF  # all four fields 0b11
    back = read_model(io.BytesIO(bytes(raw)))
    with pytest.raises(CorruptDataError):
        back.tensor("w").to_ternary()


def test_save_and_load_model_atomic(tmp_path):
    model = ModelFile(
        config=CFG, tensors=(TensorRecord.from_f32("w", np.ones((3, 2))),)
    )
    path = tmp_path / "m.b158"
    n = save_model(model, path)
    assert path.stat().st_size == n
    assert load_model(path).names() == ["w"]
    assert [p.name for p in tmp_path.iterdir()] == ["m.b158"]  # no temp leftovers
