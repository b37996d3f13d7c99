"""ENSW weight files.

Layout (little-endian)::

    magic "ENSW" | version u8 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | sizes u32 * rank
                | dtype u8 (0 ternary_i8, 1 real_f32) | payload

Ternary payloads hold one signed byte per entry, restricted to 0x00, 0x01
and 0xFF. Real payloads are row-major float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..blocks import LayerWeights
from ..he.serialize import FormatError

WEIGHT_MAGIC = b"ENSW"
WEIGHT_VERSION = 1
TERNARY_I8 = 0
REAL_F32 = 1
_TERNARY_NAMES = ("wq", "wk", "wv", "wo", "w1", "w2", "w3")


def weights_to_bytes(tensors: dict[str, np.ndarray], ternary: set[str] | None = None) -> bytes:
    """Serialize named tensors; names in ``ternary`` are stored as int8."""
    ternary = set(_TERNARY_NAMES) if ternary is None else ternary
    out = [WEIGHT_MAGIC, struct.pack("<BI", WEIGHT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        if name in ternary:
            if not np.all(np.isin(arr, (-1, 0, 1))):
                raise ValueError(f"tensor {name!r} is not ternary")
            out.append(struct.pack("<B", TERNARY_I8) + np.ascontiguousarray(arr, dtype=np.int8).tobytes())
        else:
            out.append(struct.pack("<B", REAL_F32) + np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def weights_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    """Parse an ENSW blob; every fault carries the byte offset where it was found."""
    view = memoryview(data)
    off = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise FormatError(f"length mismatch: {what} needs {n} bytes, {len(view) - off} remain", off)
        chunk = view[off: off + n]
        off += n
        return chunk

    if bytes(take(4, "magic")) != WEIGHT_MAGIC:
        raise FormatError("bad weight-file magic", 0)
    version, count = struct.unpack("<BI", take(5, "header"))
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight-file version {version}", 4)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        tag_off = off
        (dtype,) = struct.unpack("<B", take(1, "dtype"))
        size = int(np.prod(shape, dtype=np.int64))
        if dtype == TERNARY_I8:
            start = off
            raw = np.frombuffer(take(size, f"payload of {name!r}"), dtype=np.uint8)
            bad = np.flatnonzero((raw != 0x00) & (raw != 0x01) & (raw != 0xFF))
            if bad.size:
                at = start + int(bad[0])
                raise FormatError(f"non-ternary byte 0x{raw[bad[0]]:02X} in tensor {name!r}", at)
            tensors[name] = raw.view(np.int8).reshape(shape).copy()
        elif dtype == REAL_F32:
            raw = np.frombuffer(take(4 * size, f"payload of {name!r}"), dtype="<f4")
            tensors[name] = raw.astype(np.float64).reshape(shape)
        else:
            raise FormatError(f"unknown dtype tag {dtype} for tensor {name!r}", tag_off)
    if off != len(view):
        raise FormatError(f"length mismatch: {len(view) - off} trailing bytes", off)
    return tensors


def save_weights(weights: LayerWeights, path) -> None:
    Path(path).write_bytes(weights_to_bytes(weights.tensors()))


def load_weights(path) -> LayerWeights:
    return LayerWeights.from_tensors(weights_from_bytes(Path(path).read_bytes()))
