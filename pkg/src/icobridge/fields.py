"""Per-vertex scalar fields and their binary file format (SBDF).

A field holds one float32 value per icosphere vertex plus a validity mask;
the invalid region (the medial-wall stand-in) is stored as exact zeros and
stays zero through every transformation. Storage is 32-bit, computation is
64-bit (use `values64`).

SBDF layout, all integers little-endian:
    bytes 0..3    magic "SBDF"
    bytes 4..7    u32 version (= 1)
    bytes 8..11   u32 icosphere level
    bytes 12..15  u32 vertex count (must equal 10*4**level + 2)
    byte  16      u8 kind: 0 = thickness, 1 = delta
    bytes 17..19  reserved, zero
    then vertex_count little-endian float32 values
    then ceil(vertex_count/8) mask bytes, LSB-first (bit i of byte j is
    vertex 8j+i; 1 = valid)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SBDF"
VERSION = 1
HEADER = struct.Struct("<4sIIIB3x")  # 20 bytes

KIND_CODES = {"thickness": 0, "delta": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


class FormatError(ValueError):
    """Malformed SBDF data; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def vertex_count_for_level(level: int) -> int:
    return 10 * 4 ** level + 2


@dataclass(frozen=True)
class VertexField:
    """Immutable per-vertex scalar field; masked entries are exact zeros."""

    level: int
    values: np.ndarray
    mask: np.ndarray
    kind: str = "thickness"

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown field kind {self.kind!r}")
        n = vertex_count_for_level(self.level)
        values = np.asarray(self.values, dtype=np.float32).copy()
        mask = np.asarray(self.mask, dtype=bool).copy()
        if values.shape != (n,):
            raise ValueError(f"level {self.level} needs {n} values, got shape {values.shape}")
        if mask.shape != (n,):
            raise ValueError(f"mask shape {mask.shape} does not match {n} vertices")
        values[~mask] = 0.0
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @property
    def values64(self) -> np.ndarray:
        return self.values.astype(np.float64)

    @property
    def vertex_count(self) -> int:
        return self.values.shape[0]

    def with_values(self, values, kind: str | None = None) -> "VertexField":
        return VertexField(self.level, values, self.mask, kind or self.kind)


def check_compatible(a: VertexField, b: VertexField) -> None:
    """Fields that enter one computation must share level and mask."""
    if a.level != b.level:
        raise ValueError(f"field levels disagree: {a.level} vs {b.level}")
    if not np.array_equal(a.mask, b.mask):
        raise ValueError("field masks disagree")


def write_field(field: VertexField, path) -> None:
    n = field.vertex_count
    header = HEADER.pack(MAGIC, VERSION, field.level, n, KIND_CODES[field.kind])
    values = field.values.astype("<f4").tobytes()
    mask_bytes = np.packbits(field.mask, bitorder="little").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values)
        fh.write(mask_bytes)


def read_field(path) -> VertexField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size:
        raise FormatError(f"file truncated in header: {len(blob)} bytes", len(blob))
    magic, version, level, count, kind_code = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if level > 12:
        raise FormatError(f"implausible level {level}", 8)
    if count != vertex_count_for_level(level):
        raise FormatError(f"vertex count {count} does not match level {level}", 12)
    if kind_code not in KIND_NAMES:
        raise FormatError(f"unknown kind code {kind_code}", 16)
    values_end = HEADER.size + 4 * count
    mask_len = (count + 7) // 8
    expected = values_end + mask_len
    if len(blob) != expected:
        raise FormatError(f"expected {expected} bytes, found {len(blob)}",
                          min(len(blob), expected))
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=HEADER.size)
    mask_bits = np.frombuffer(blob, dtype=np.uint8, count=mask_len, offset=values_end)
    mask = np.unpackbits(mask_bits, count=count, bitorder="little").astype(bool)
    bad = np.flatnonzero(~mask & (values != 0))
    if bad.size:
        raise FormatError(f"masked vertex {bad[0]} carries a nonzero value",
                          HEADER.size + 4 * int(bad[0]))
    return VertexField(level=level, values=values.astype(np.float32),
                       mask=mask, kind=KIND_NAMES[kind_code])


def file_size_for_level(level: int) -> int:
    n = vertex_count_for_level(level)
    return HEADER.size + 4 * n + (n + 7) // 8
