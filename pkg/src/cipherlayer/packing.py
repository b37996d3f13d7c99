"""Column-wise packing of real matrices into ciphertexts.

Column j of an s×d matrix goes into one ciphertext, slot i holding X[i, j];
slots at and beyond s are zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .he.base import Backend, Ciphertext, Plaintext
from .he.errors import SlotMismatchError
from .he.serialize import FormatError, ciphertext_from_bytes, ciphertext_to_bytes

MATRIX_MAGIC = b"ENSM"


@dataclass(frozen=True)
class PackedMatrix:
    cols: tuple[Ciphertext, ...]
    rows: int
    cols_n: int
    layout: str = "column"

    def __post_init__(self):
        if len(self.cols) != self.cols_n:
            raise ValueError(f"expected {self.cols_n} column ciphertexts, got {len(self.cols)}")
        if len({c.slot_count for c in self.cols}) > 1:
            raise ValueError("column ciphertexts disagree on slot count")
        if self.cols and self.rows > self.cols[0].slot_count:
            raise ValueError(f"{self.rows} rows exceed {self.cols[0].slot_count} slots")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols_n

    @property
    def level(self) -> int:
        return min(c.level for c in self.cols)

    @property
    def depth(self) -> int:
        return max(c.depth for c in self.cols)

    @property
    def slot_count(self) -> int:
        return self.cols[0].slot_count

    @property
    def utilization(self) -> float:
        return self.rows / self.slot_count

    def column(self, j: int) -> Ciphertext:
        return self.cols[j]

    def slice_cols(self, start: int, stop: int) -> "PackedMatrix":
        return PackedMatrix(tuple(self.cols[start:stop]), self.rows, stop - start)


@dataclass(frozen=True)
class TernaryMatrix:
    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2:
            raise ValueError("ternary matrix must be two-dimensional")
        if not np.all(np.isin(e, (-1, 0, 1))):
            raise ValueError("ternary matrix entries must lie in {-1, 0, 1}")
        object.__setattr__(self, "entries", e.astype(np.int8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, m: int, density: float = 2 / 3) -> "TernaryMatrix":
        signs = rng.choice(np.array([-1, 1], dtype=np.int8), size=(d, m))
        keep = rng.random((d, m)) < density
        return cls(np.where(keep, signs, 0).astype(np.int8))

    @classmethod
    def zeros(cls, d: int, m: int) -> "TernaryMatrix":
        return cls(np.zeros((d, m), dtype=np.int8))


def pack_columns(be: Backend, X, level: int | None = None, tag: str | None = None) -> PackedMatrix:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    s, d = X.shape
    if s > be.slot_count:
        raise SlotMismatchError(f"{s} rows do not fit in {be.slot_count} slots; oversize matrices are rejected")
    cols = tuple(be.encrypt(be.encode(X[:, j], level=level), tag=tag) for j in range(d))
    return PackedMatrix(cols, s, d)


def unpack(be: Backend, pm: PackedMatrix) -> np.ndarray:
    out = np.empty((pm.rows, pm.cols_n))
    for j, ct in enumerate(pm.cols):
        out[:, j] = be.decrypt(ct)[: pm.rows]
    return out


def relevel(be: Backend, pm: PackedMatrix, level: int | None = None) -> PackedMatrix:
    """Bring every column to the lowest column level (or to ``level``)."""
    target = pm.level if level is None else level
    return PackedMatrix(tuple(be.drop_to(c, target) for c in pm.cols), pm.rows, pm.cols_n)


def from_columns(cols: Sequence[Ciphertext], rows: int) -> PackedMatrix:
    return PackedMatrix(tuple(cols), rows, len(cols))


def hconcat(parts: Sequence[PackedMatrix]) -> PackedMatrix:
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ValueError("cannot concatenate packed matrices with different row counts")
    return from_columns([c for p in parts for c in p.cols], rows)


def encode_broadcast(be: Backend, c: float, level: int | None = None, scale: float | None = None) -> Plaintext:
    return be.encode(np.full(be.slot_count, float(c)), level=level, scale=scale)


def encode_slotwise(be: Backend, v, level: int | None = None, scale: float | None = None) -> Plaintext:
    return be.encode(np.asarray(v, dtype=np.float64), level=level, scale=scale)


def live_mask(rows: int, slot_count: int) -> np.ndarray:
    m = np.zeros(slot_count)
    m[:rows] = 1.0
    return m


def matrix_to_bytes(pm: PackedMatrix, ring_degree: int) -> bytes:
    parts = [MATRIX_MAGIC, struct.pack("<II", pm.rows, pm.cols_n)]
    parts += [ciphertext_to_bytes(c, ring_degree) for c in pm.cols]
    return b"".join(parts)


def matrix_from_bytes(data: bytes, offset: int = 0) -> tuple[PackedMatrix, int]:
    if data[offset: offset + 4] != MATRIX_MAGIC:
        raise FormatError(f"bad packed-matrix magic {bytes(data[offset:offset + 4])!r}", offset)
    if len(data) - offset < 12:
        raise FormatError("truncated packed-matrix header", offset)
    s, d = struct.unpack_from("<II", data, offset + 4)
    off = offset + 12
    cols = []
    for _ in range(d):
        ct, off = ciphertext_from_bytes(data, off)
        cols.append(ct)
    return PackedMatrix(tuple(cols), s, d), off
