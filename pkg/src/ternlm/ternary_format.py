"""Bit-packed ternary tensors (2 bits per weight) and the binary model container.

Packing: code 0 -> 0b00, +1 -> 0b01, -1 -> 0b10; 0b11 is reserved and always
rejected on decode. Weight j of a row occupies bits 2*(j%4)..2*(j%4)+1 of
byte j//4 of that row (little-endian within the byte). Every row starts on a
byte boundary so kernels can index rows without bit offsets; padding fields
past the last column are 0b00.

Model files: magic "B158", version 1, all multi-byte integers little-endian.
After the header comes the config as a length-prefixed UTF-8 JSON object,
then a tensor count and one record per tensor:

    name_len:u16  name:utf-8
    dtype:u8      (0=F32, 1=I8, 2=TERNARY_PACKED)
    ndim:u8       dims:u32 * ndim
    scale:f64     (present iff dtype is TERNARY_PACKED)
    payload_len:u64  payload bytes

F32 payloads are little-endian IEEE float32, I8 payloads raw int8, ternary
payloads the packed format above with dims = (rows, cols).
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .config import TransformerConfig
from .errors import (
    BadMagicError,
    CorruptDataError,
    DimensionError,
    DuplicateTensorError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)

MAGIC = b"B158"
FORMAT_VERSION = 1

DTYPE_F32 = "F32"
DTYPE_I8 = "I8"
DTYPE_TERNARY = "TERNARY_PACKED"

_DTYPE_TO_CODE = {DTYPE_F32: 0, DTYPE_I8: 1, DTYPE_TERNARY: 2}
_CODE_TO_DTYPE = {v: k for k, v in _DTYPE_TO_CODE.items()}

# field value per code; the reserved value 3 is never written
_CODE_TO_FIELD = {0: 0, 1: 1, -1: 2}


def packed_row_bytes(cols: int) -> int:
    """Bytes per packed row: four 2-bit fields per byte, rows byte-aligned."""
    return (cols + 3) // 4


def packed_nbytes(rows: int, cols: int) -> int:
    return rows * packed_row_bytes(cols)


@dataclass(frozen=True)
class TernaryTensor:
    """A bit-packed {-1, 0, +1} matrix with its per-tensor absmean scale."""

    rows: int
    cols: int
    gamma: float
    packed: bytes

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise DimensionError(f"tensor dims must be >= 1, got {self.rows}x{self.cols}")
        expected = packed_nbytes(self.rows, self.cols)
        if len(self.packed) != expected:
            raise DimensionError(
                f"packed buffer has {len(self.packed)} bytes, expected {expected} "
                f"for a {self.rows}x{self.cols} tensor"
            )
        if not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValidationError(f"gamma must be finite and >= 0, got {self.gamma}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def packed_view(self) -> np.ndarray:
        """Read-only uint8 view of shape (rows, row_bytes)."""
        return np.frombuffer(self.packed, dtype=np.uint8).reshape(
            self.rows, packed_row_bytes(self.cols)
        )


def pack(codes, gamma: float = 1.0) -> TernaryTensor:
    """Pack a ternary code matrix into 2-bit fields, 4 codes per byte."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.size == 0:
        raise DimensionError(f"expected a non-empty 2-d code matrix, got shape {codes.shape}")
    codes = codes.astype(np.int64, copy=False)
    if not np.isin(codes, (-1, 0, 1)).all():
        bad = codes[~np.isin(codes, (-1, 0, 1))][0]
        raise ValidationError(f"codes must be in {{-1, 0, +1}}, found {bad}")
    rows, cols = codes.shape
    nbytes = packed_row_bytes(cols)
    # -1 -> 2, 0 -> 0, +1 -> 1
    fields = np.zeros((rows, nbytes * 4), dtype=np.uint8)
    fields[:, :cols] = (codes % 3).astype(np.uint8)
    quads = fields.reshape(rows, nbytes, 4)
    packed = (
        quads[:, :, 0]
        | (quads[:, :, 1] << 2)
        | (quads[:, :, 2] << 4)
        | (quads[:, :, 3] << 6)
    ).astype(np.uint8)
    return TernaryTensor(rows=rows, cols=cols, gamma=float(gamma), packed=packed.tobytes())


def unpack(t: TernaryTensor) -> np.ndarray:
    """Decode a TernaryTensor back to an int8 code matrix (exact inverse of pack).

    Raises CorruptDataError, naming the row and column, when the reserved
    field 0b11 appears anywhere or when a padding field is nonzero.
    """
    raw = t.packed_view()
    rows, cols = t.rows, t.cols
    nbytes = raw.shape[1]
    fields = np.empty((rows, nbytes * 4), dtype=np.uint8)
    for k in range(4):
        fields[:, k::4] = (raw >> (2 * k)) & 3
    bad = np.argwhere(fields == 3)
    if bad.size:
        r, c = int(bad[0][0]), int(bad[0][1])
        where = f"row {r}, column {c}" if c < cols else f"row {r}, padding field {c}"
        raise CorruptDataError(f"reserved field 0b11 at {where}")
    pad = fields[:, cols:]
    if pad.size and pad.any():
        r, c = np.argwhere(pad != 0)[0]
        raise CorruptDataError(f"nonzero padding field at row {int(r)}, field {cols + int(c)}")
    data = fields[:, :cols].astype(np.int8)
    return np.where(data == 2, np.int8(-1), data).astype(np.int8)


# ---------------------------------------------------------------------------
# model container
# ---------------------------------------------------------------------------

_DTYPE_WIDTH = {DTYPE_F32: 4, DTYPE_I8: 1}


def expected_payload_len(dtype: str, dims: tuple[int, ...]) -> int:
    if dtype == DTYPE_TERNARY:
        if len(dims) != 2:
            raise DimensionError(f"{DTYPE_TERNARY} tensors must be 2-d, got dims {dims}")
        return packed_nbytes(dims[0], dims[1])
    n = 1
    for d in dims:
        n *= d
    return n * _DTYPE_WIDTH[dtype]


@dataclass(frozen=True)
class TensorRecord:
    """One named tensor inside a model file."""

    name: str
    dtype: str
    dims: tuple[int, ...]
    payload: bytes
    scale: float | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise ValidationError("tensor name must be non-empty")
        if self.dtype not in _DTYPE_TO_CODE:
            raise ValidationError(f"unknown dtype {self.dtype!r} for tensor {self.name!r}")
        if not self.dims or any(d < 1 for d in self.dims):
            raise DimensionError(f"tensor {self.name!r} has invalid dims {self.dims}")
        if (self.scale is not None) != (self.dtype == DTYPE_TERNARY):
            raise ValidationError(
                f"tensor {self.name!r}: scale must be present iff dtype is {DTYPE_TERNARY}"
            )
        expected = expected_payload_len(self.dtype, self.dims)
        if len(self.payload) != expected:
            raise DimensionError(
                f"tensor {self.name!r}: payload is {len(self.payload)} bytes, "
                f"expected {expected} for dtype {self.dtype} dims {self.dims}"
            )

    @classmethod
    def from_f32(cls, name: str, array) -> "TensorRecord":
        arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64), dtype=np.float64)
        return cls(
            name=name,
            dtype=DTYPE_F32,
            dims=tuple(arr.shape),
            payload=arr.astype("<f4").tobytes(),
        )

    @classmethod
    def from_i8(cls, name: str, array) -> "TensorRecord":
        arr = np.ascontiguousarray(np.asarray(array, dtype=np.int8))
        return cls(name=name, dtype=DTYPE_I8, dims=tuple(arr.shape), payload=arr.tobytes())

    @classmethod
    def from_ternary(cls, name: str, tensor: TernaryTensor) -> "TensorRecord":
        return cls(
            name=name,
            dtype=DTYPE_TERNARY,
            dims=(tensor.rows, tensor.cols),
            payload=tensor.packed,
            scale=tensor.gamma,
        )

    def to_f32(self) -> np.ndarray:
        if self.dtype != DTYPE_F32:
            raise ValidationError(f"tensor {self.name!r} is {self.dtype}, not {DTYPE_F32}")
        return np.frombuffer(self.payload, dtype="<f4").reshape(self.dims).astype(np.float64)

    def to_i8(self) -> np.ndarray:
        if self.dtype != DTYPE_I8:
            raise ValidationError(f"tensor {self.name!r} is {self.dtype}, not {DTYPE_I8}")
        return np.frombuffer(self.payload, dtype=np.int8).reshape(self.dims)

    def to_ternary(self) -> TernaryTensor:
        if self.dtype != DTYPE_TERNARY:
            raise ValidationError(f"tensor {self.name!r} is {self.dtype}, not {DTYPE_TERNARY}")
        t = TernaryTensor(
            rows=self.dims[0], cols=self.dims[1], gamma=self.scale, packed=self.payload
        )
        unpack(t)  # reject corrupt payloads up front
        return t


@dataclass(frozen=True)
class ModelFile:
    """In-memory form of the on-disk container: a config plus named tensors."""

    config: TransformerConfig
    tensors: tuple[TensorRecord, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tensors", tuple(self.tensors))
        seen: set[str] = set()
        for t in self.tensors:
            if t.name in seen:
                raise DuplicateTensorError(f"duplicate tensor name {t.name!r}")
            seen.add(t.name)

    def tensor(self, name: str) -> TensorRecord:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if data is None or len(data) != n:
        got = 0 if data is None else len(data)
        raise TruncatedFileError(f"stream ended inside {what}: wanted {n} bytes, got {got}")
    return data


def write_model(model: ModelFile, sink: BinaryIO) -> int:
    """Serialize a ModelFile; returns the number of bytes written."""
    written = 0

    def put(b: bytes) -> None:
        nonlocal written
        sink.write(b)
        written += len(b)

    put(MAGIC)
    put(struct.pack("<I", FORMAT_VERSION))
    cfg = model.config.to_json().encode("utf-8")
    put(struct.pack("<I", len(cfg)))
    put(cfg)
    put(struct.pack("<I", len(model.tensors)))
    for t in model.tensors:
        name = t.name.encode("utf-8")
        put(struct.pack("<H", len(name)))
        put(name)
        put(struct.pack("<BB", _DTYPE_TO_CODE[t.dtype], len(t.dims)))
        put(struct.pack(f"<{len(t.dims)}I", *t.dims))
        if t.dtype == DTYPE_TERNARY:
            put(struct.pack("<d", t.scale))
        put(struct.pack("<Q", len(t.payload)))
        put(t.payload)
    return written


def read_model(source: BinaryIO) -> ModelFile:
    """Parse a model stream written by write_model; exact structural inverse."""
    magic = _read_exact(source, 4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(source, 4, "version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}")
    (cfg_len,) = struct.unpack("<I", _read_exact(source, 4, "config length"))
    cfg = TransformerConfig.from_json(_read_exact(source, cfg_len, "config").decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(source, 4, "tensor count"))
    tensors: list[TensorRecord] = []
    names: set[str] = set()
    for i in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(source, 2, f"tensor {i} name length"))
        name = _read_exact(source, name_len, f"tensor {i} name").decode("utf-8")
        if name in names:
            raise DuplicateTensorError(f"duplicate tensor name {name!r}")
        names.add(name)
        dtype_code, ndim = struct.unpack("<BB", _read_exact(source, 2, f"tensor {name!r} header"))
        if dtype_code not in _CODE_TO_DTYPE:
            raise ValidationError(f"tensor {name!r}: unknown dtype code {dtype_code}")
        dtype = _CODE_TO_DTYPE[dtype_code]
        dims = struct.unpack(
            f"<{ndim}I", _read_exact(source, 4 * ndim, f"tensor {name!r} dims")
        )
        scale = None
        if dtype == DTYPE_TERNARY:
            (scale,) = struct.unpack("<d", _read_exact(source, 8, f"tensor {name!r} scale"))
        (payload_len,) = struct.unpack(
            "<Q", _read_exact(source, 8, f"tensor {name!r} payload length")
        )
        expected = expected_payload_len(dtype, dims)
        if payload_len != expected:
            raise DimensionError(
                f"tensor {name!r}: declared payload {payload_len} bytes, "
                f"expected {expected} for dtype {dtype} dims {dims}"
            )
        payload = _read_exact(source, payload_len, f"tensor {name!r} payload")
        tensors.append(TensorRecord(name=name, dtype=dtype, dims=dims, payload=payload, scale=scale))
    return ModelFile(config=cfg, tensors=tuple(tensors))


def save_model(model: ModelFile, path) -> int:
    """Atomic write: serialize to a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            n = write_model(model, f)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return n


def load_model(path) -> ModelFile:
    with open(path, "rb") as f:
        return read_model(f)
