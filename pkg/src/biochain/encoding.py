"""Byte-level encoding shared by hashing, the ledger, and snapshot files.

Conventions: integers are big-endian, floats are IEEE-754 binary64
big-endian in row-major order, and variable-length fields carry a 4-byte
length prefix. Keeping one canonical encoding makes every hash in the
system reproducible across platforms.
"""

from __future__ import annotations

import struct

import numpy as np


def encode_u32(value: int) -> bytes:
    return struct.pack(">I", value)


def encode_u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def lp(data: bytes) -> bytes:
    """Length-prefix a byte string (4-byte big-endian length)."""
    return struct.pack(">I", len(data)) + data


def encode_f64_array(array: np.ndarray) -> bytes:
    """Canonical bytes for a float array: ndim, dims, then raw values."""
    a = np.asarray(array, dtype=np.float64)
    out = [encode_u32(a.ndim)]
    for dim in a.shape:
        out.append(encode_u32(dim))
    out.append(a.astype(">f8").tobytes(order="C"))
    return b"".join(out)


def encode_vector(vector: np.ndarray) -> bytes:
    """Canonical bytes for a 1-D float vector: length then raw values."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return encode_u32(v.shape[0]) + v.astype(">f8").tobytes()


def decode_vector(data: bytes) -> np.ndarray:
    reader = ByteReader(data)
    n = reader.read_u32()
    raw = reader.read(8 * n)
    return np.frombuffer(raw, dtype=">f8").astype(np.float64)


class ByteReader:
    """Sequential reader over an immutable byte buffer."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise ValueError("truncated record")
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def read_u32(self) -> int:
        return struct.unpack(">I", self.read(4))[0]

    def read_u64(self) -> int:
        return struct.unpack(">Q", self.read(8))[0]

    def read_lp(self) -> bytes:
        return self.read(self.read_u32())

    def read_f64_array(self) -> np.ndarray:
        ndim = self.read_u32()
        shape = tuple(self.read_u32() for _ in range(ndim))
        count = 1
        for dim in shape:
            count *= dim
        raw = self.read(8 * count)
        return np.frombuffer(raw, dtype=">f8").astype(np.float64).reshape(shape)

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)
