"""Homomorphic backends: an exact clear oracle and a leveled RNS-CKKS implementation."""

from .base import Backend, Ciphertext, KeyMaterial, Plaintext, decompose_rotation, power_of_two_steps
from .ckks import CkksBackend, RefreshOracle, ckks_keygen
from .clear import ClearBackend, clear_keygen
from .errors import (DepthExhaustedError, HeError, KeyMismatchError, MissingKeyError, ParamError,
                     RefreshDisabledError, SlotMismatchError)
from .params import PRESETS, HeParams, preset, toy_params


def keygen(params: HeParams, seed: int = 0, backend: str = "ckks", **kw) -> KeyMaterial:
    """Generate key material for ``backend`` deterministically from ``seed``."""
    if backend == "clear":
        return clear_keygen(params, seed)
    return ckks_keygen(params, seed, **kw)


def make_backend(kind: str, params: HeParams, seed: int = 0, **kw) -> Backend:
    if kind == "clear":
        return ClearBackend(params, seed=seed, **kw)
    if kind == "ckks":
        return CkksBackend(params, seed=seed, **kw)
    raise ValueError(f"unknown backend {kind!r}; choose 'clear' or 'ckks'")


__all__ = [
    "Backend", "Ciphertext", "KeyMaterial", "Plaintext", "CkksBackend", "ClearBackend", "RefreshOracle",
    "HeParams", "PRESETS", "preset", "toy_params", "keygen", "make_backend", "ckks_keygen", "clear_keygen",
    "decompose_rotation", "power_of_two_steps", "HeError", "ParamError", "DepthExhaustedError",
    "KeyMismatchError", "MissingKeyError", "RefreshDisabledError", "SlotMismatchError",
]
