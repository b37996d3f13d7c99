"""Binary ciphertext format.

Layout (little-endian)::

    "ENSC" | version u8 | N' u32 | level u16 | scale exponent i16 | payload length u64 | payload

The header's scale exponent is the rounded log2 of the scale. The payload
carries the exact float64 scale and the remaining metadata, so a round trip
reproduces the ciphertext bit for bit.
"""

from __future__ import annotations

import struct

import numpy as np

from .base import Ciphertext, nominal_scale_exponent

MAGIC = b"ENSC"
VERSION = 1
_HEADER = struct.Struct("<4sBIHhQ")
_META = struct.Struct("<BdIdH")  # kind, scale, depth, noise, slot_count bytes follow separately
KIND_CLEAR = 0
KIND_CKKS = 1


class FormatError(ValueError):
    """Malformed serialized data; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _pack_str(s: str | None) -> bytes:
    raw = b"" if s is None else s.encode("utf-8")
    flag = 0 if s is None else 1
    return struct.pack("<BH", flag, len(raw)) + raw


def _unpack_str(buf: memoryview, off: int) -> tuple[str | None, int]:
    flag, n = struct.unpack_from("<BH", buf, off)
    off += 3
    raw = bytes(buf[off: off + n])
    if len(raw) != n:
        raise FormatError("truncated string field", off)
    return (raw.decode("utf-8") if flag else None), off + n


def ciphertext_to_bytes(ct: Ciphertext, ring_degree: int) -> bytes:
    if isinstance(ct.body, np.ndarray):
        kind = KIND_CLEAR
        arrays = [np.ascontiguousarray(ct.body, dtype="<f8")]
        shape = struct.pack("<HI", 0, ct.body.size)
    else:
        kind = KIND_CKKS
        c0, c1 = ct.body
        arrays = [np.ascontiguousarray(c0, dtype="<u8"), np.ascontiguousarray(c1, dtype="<u8")]
        shape = struct.pack("<HI", c0.shape[0], c0.shape[1])
    payload = b"".join([
        _META.pack(kind, ct.scale, ct.depth, ct.noise, 0),
        struct.pack("<I", ct.slot_count),
        _pack_str(ct.key_id),
        _pack_str(ct.tag),
        shape,
        *[a.tobytes() for a in arrays],
    ])
    header = _HEADER.pack(MAGIC, VERSION, ring_degree, ct.level, nominal_scale_exponent(ct.scale), len(payload))
    return header + payload


def ciphertext_from_bytes(data: bytes, offset: int = 0) -> tuple[Ciphertext, int]:
    """Parse one ciphertext starting at ``offset``; returns it and the end offset."""
    buf = memoryview(data)
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated ciphertext header", offset)
    magic, version, ring_degree, level, _exp, plen = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad ciphertext magic {magic!r}", offset)
    if version != VERSION:
        raise FormatError(f"unsupported ciphertext version {version}", offset + 4)
    start = offset + _HEADER.size
    end = start + plen
    if end > len(buf):
        raise FormatError(f"payload length {plen} exceeds available {len(buf) - start} bytes", offset + 15)
    off = start
    kind, scale, depth, noise, _ = _META.unpack_from(buf, off)
    off += _META.size
    (slot_count,) = struct.unpack_from("<I", buf, off)
    off += 4
    key_id, off = _unpack_str(buf, off)
    tag, off = _unpack_str(buf, off)
    rows, cols = struct.unpack_from("<HI", buf, off)
    off += 6
    if kind == KIND_CLEAR:
        nbytes = cols * 8
        body = np.frombuffer(bytes(buf[off: off + nbytes]), dtype="<f8").astype(np.float64)
        off += nbytes
    elif kind == KIND_CKKS:
        nbytes = rows * cols * 8
        if off + 2 * nbytes > end:
            raise FormatError("ciphertext rows truncated", off)
        c0 = np.frombuffer(bytes(buf[off: off + nbytes]), dtype="<u8").astype(np.uint64).reshape(rows, cols)
        off += nbytes
        c1 = np.frombuffer(bytes(buf[off: off + nbytes]), dtype="<u8").astype(np.uint64).reshape(rows, cols)
        off += nbytes
        body = (c0, c1)
    else:
        raise FormatError(f"unknown ciphertext kind {kind}", start)
    if off != end:
        raise FormatError(f"payload length mismatch: parsed {off - start} of {plen} bytes", off)
    ct = Ciphertext(body=body, level=level, scale=scale, slot_count=slot_count, key_id=key_id, depth=depth,
                    noise=noise, tag=tag)
    return ct, end


def ciphertext_header(data: bytes) -> dict:
    magic, version, ring_degree, level, exp, plen = _HEADER.unpack_from(data, 0)
    return {"magic": magic, "version": version, "ring_degree": ring_degree, "level": level,
            "scale_exponent": exp, "payload_length": plen}
