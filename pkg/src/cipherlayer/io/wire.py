"""ENSP frames for the one-request, one-response inference exchange.

Frame: magic "ENSP" | version u8 | message type u8 | body length u64 | body.

* request body: config digest (32 bytes) | key id (u16 length + UTF-8)
  | serialized packed matrix
* response body: serialized packed matrix | stage report (u32 length + UTF-8 JSON lines)
* error body: code u16 | UTF-8 message
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from enum import IntEnum

from ..packing import PackedMatrix, matrix_from_bytes, matrix_to_bytes

FRAME_MAGIC = b"ENSP"
PROTOCOL_VERSION = 1
_HEADER = struct.Struct("<4sBBQ")
MAX_BODY = 1 << 34


class MessageType(IntEnum):
    REQUEST = 1
    RESPONSE = 2
    ERROR = 3


class ErrorCode(IntEnum):
    MALFORMED = 1
    VERSION = 2
    CONFIG_MISMATCH = 3
    KEY_MISMATCH = 4
    MISSING_KEYS = 5
    EVALUATION = 6


class ProtocolError(Exception):
    def __init__(self, message: str, code: ErrorCode = ErrorCode.MALFORMED):
        super().__init__(message)
        self.code = code


class RemoteError(Exception):
    """The peer answered with an error frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Request:
    config_digest: bytes
    key_id: str
    matrix: PackedMatrix


@dataclass(frozen=True)
class Response:
    matrix: PackedMatrix
    report: str


def encode_frame(kind: MessageType, body: bytes) -> bytes:
    return _HEADER.pack(FRAME_MAGIC, PROTOCOL_VERSION, int(kind), len(body)) + body


def decode_header(head: bytes) -> tuple[MessageType, int]:
    magic, version, kind, length = _HEADER.unpack(head)
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version} (expected {PROTOCOL_VERSION})",
                            ErrorCode.VERSION)
    try:
        kind = MessageType(kind)
    except ValueError:
        raise ProtocolError(f"unknown message type {kind}") from None
    if length > MAX_BODY:
        raise ProtocolError(f"frame body of {length} bytes is too large")
    return kind, length


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ProtocolError(f"connection closed after {got} of {n} bytes")
        got += k
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[MessageType, bytes]:
    kind, length = decode_header(_recv_exact(sock, _HEADER.size))
    return kind, _recv_exact(sock, length)


def write_frame(sock: socket.socket, kind: MessageType, body: bytes) -> None:
    sock.sendall(encode_frame(kind, body))


def _pack_str(s: str, fmt: str = "<H") -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def encode_request(req: Request, ring_degree: int) -> bytes:
    if len(req.config_digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    return req.config_digest + _pack_str(req.key_id) + matrix_to_bytes(req.matrix, ring_degree)


def decode_request(body: bytes) -> Request:
    if len(body) < 34:
        raise ProtocolError("request body too short")
    digest = body[:32]
    (n,) = struct.unpack_from("<H", body, 32)
    key_id = body[34: 34 + n].decode("utf-8")
    pm, end = matrix_from_bytes(body, 34 + n)
    if end != len(body):
        raise ProtocolError(f"{len(body) - end} trailing bytes in request")
    return Request(digest, key_id, pm)


def encode_response(resp: Response, ring_degree: int) -> bytes:
    return matrix_to_bytes(resp.matrix, ring_degree) + _pack_str(resp.report, "<I")


def decode_response(body: bytes) -> Response:
    pm, off = matrix_from_bytes(body, 0)
    if len(body) - off < 4:
        raise ProtocolError("response lacks a stage report")
    (n,) = struct.unpack_from("<I", body, off)
    if off + 4 + n != len(body):
        raise ProtocolError("stage report length does not match the frame")
    return Response(pm, body[off + 4: off + 4 + n].decode("utf-8"))


def encode_error(code: int, message: str) -> bytes:
    return struct.pack("<H", int(code)) + message.encode("utf-8")


def decode_error(body: bytes) -> RemoteError:
    if len(body) < 2:
        return RemoteError(int(ErrorCode.MALFORMED), "truncated error frame")
    (code,) = struct.unpack_from("<H", body)
    return RemoteError(code, body[2:].decode("utf-8", errors="replace"))
