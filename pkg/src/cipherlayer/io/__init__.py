"""File formats, run configuration, wire framing, and the client/server flow."""

from .config import RunConfig
from .keys import backend_from_keys, load_keys, save_keys
from .server import InferenceServer, InferenceService, parse_address, request_inference, run_client
from .weights import load_weights, save_weights, weights_from_bytes, weights_to_bytes
from .wire import ErrorCode, MessageType, ProtocolError, RemoteError, Request, Response

__all__ = [
    "RunConfig", "save_keys", "load_keys", "backend_from_keys", "InferenceServer", "InferenceService",
    "parse_address", "request_inference", "run_client", "save_weights", "load_weights", "weights_to_bytes",
    "weights_from_bytes", "ErrorCode", "MessageType", "ProtocolError", "RemoteError", "Request", "Response",
]
