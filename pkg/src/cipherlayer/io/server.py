"""Inference server and client over ENSP frames.

The server holds evaluation keys only: it can add, multiply, rotate and
(through the refresh oracle) refresh, but it has no way to decrypt. Each
connection carries exactly one request and one response.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

import numpy as np

from ..blocks import LayerWeights
from ..he import Backend, CkksBackend, ClearBackend, HeError, KeyMaterial, RefreshOracle
from ..he.errors import MissingKeyError
from ..packing import pack_columns, unpack
from ..pipeline import run_kernel
from ..runtime import LevelTracker, OpCounters
from .config import RunConfig
from .keys import require_evaluation_keys
from .wire import (ErrorCode, MessageType, ProtocolError, RemoteError, Request, Response, decode_error,
                   decode_request, decode_response, encode_error, encode_request, encode_response, read_frame,
                   write_frame)

log = logging.getLogger(__name__)


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


class InferenceService:
    """Stateless request handler shared by all connections (keys and weights are read-only)."""

    def __init__(self, config: RunConfig, weights: LayerWeights, eval_keys: KeyMaterial, backend: str,
                 oracle: RefreshOracle | None = None):
        if eval_keys.has_secret:
            raise ValueError("the server must be given evaluation keys without the secret key")
        self.config = config
        self.layer = config.layer_config()
        self.weights = weights
        self.keys = eval_keys
        self.backend = backend
        self.oracle = oracle
        self._digest = config.digest()

    def evaluator(self) -> Backend:
        counters = OpCounters()
        if self.backend == "clear":
            return ClearBackend(self.keys.params, keys=self.keys, counters=counters, strict=True)
        return CkksBackend(self.keys.params, keys=self.keys, counters=counters, strict=True,
                           refresh_oracle=self.oracle or False)

    def handle(self, req: Request) -> Response:
        if req.config_digest != self._digest:
            raise ProtocolError("request was built for a different run configuration", ErrorCode.CONFIG_MISMATCH)
        if req.key_id != self.keys.key_id:
            raise ProtocolError(f"request key id {req.key_id} does not match server key id {self.keys.key_id}",
                                ErrorCode.KEY_MISMATCH)
        try:
            require_evaluation_keys(self.keys, self.backend)
        except MissingKeyError as exc:
            raise ProtocolError(str(exc), ErrorCode.MISSING_KEYS) from None
        be = self.evaluator()
        tracker = LevelTracker(be.counters)
        try:
            out = run_kernel(be, self.config.kernel, req.matrix, self.weights, self.layer, tracker)
        except (HeError, ValueError) as exc:
            raise ProtocolError(f"evaluation failed: {exc}", ErrorCode.EVALUATION) from None
        return Response(out, tracker.records_jsonl())

    def handle_bytes(self, kind: MessageType, body: bytes) -> tuple[MessageType, bytes]:
        try:
            if kind != MessageType.REQUEST:
                raise ProtocolError(f"expected a request frame, got {kind.name.lower()}")
            resp = self.handle(decode_request(body))
            return MessageType.RESPONSE, encode_response(resp, self.keys.params.ring_degree)
        except ProtocolError as exc:
            return MessageType.ERROR, encode_error(exc.code, str(exc))
        except ValueError as exc:  # malformed payloads (FormatError is a ValueError)
            return MessageType.ERROR, encode_error(ErrorCode.MALFORMED, str(exc))


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service: InferenceService = self.server.service
        try:
            kind, body = read_frame(self.request)
        except ProtocolError as exc:
            write_frame(self.request, MessageType.ERROR, encode_error(exc.code, str(exc)))
            return
        out_kind, out_body = service.handle_bytes(kind, body)
        write_frame(self.request, out_kind, out_body)
        self.server.served += 1


class InferenceServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: InferenceService):
        super().__init__(address, _Handler)
        self.service = service
        self.served = 0

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="inference-server", daemon=True)
        t.start()
        return t


def request_inference(address: str, req: Request, ring_degree: int, timeout: float | None = None) -> Response:
    """Send one request frame and wait for the single reply."""
    with socket.create_connection(parse_address(address), timeout=timeout) as sock:
        write_frame(sock, MessageType.REQUEST, encode_request(req, ring_degree))
        kind, body = read_frame(sock)
    if kind == MessageType.ERROR:
        raise decode_error(body)
    if kind != MessageType.RESPONSE:
        raise RemoteError(int(ErrorCode.MALFORMED), f"unexpected {kind.name.lower()} frame")
    return decode_response(body)


def run_client(address: str, be: Backend, config: RunConfig, X, timeout: float | None = None):
    """Encrypt ``X``, send it, and decrypt the reply. Returns ``(Y, response)``."""
    pm = pack_columns(be, np.asarray(X, dtype=np.float64))
    resp = request_inference(address, Request(config.digest(), be.key_id, pm), be.params.ring_degree, timeout)
    return unpack(be, resp.matrix), resp
