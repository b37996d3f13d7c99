"""Key files (``.npz``) and backend construction from them.

A full key file carries the secret; an evaluation key file carries only
the public, relinearization and rotation keys and is what a server loads.
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

import numpy as np

from ..he import CkksBackend, ClearBackend, HeParams, KeyMaterial, RefreshOracle
from ..he.ckks import CkksSecret, rns_context
from ..he.errors import MissingKeyError
from ..runtime import OpCounters

_PARAM_FIELDS = [f.name for f in fields(HeParams) if f.init and f.name != "security_note"]


def save_keys(keys: KeyMaterial, path, include_secret: bool = True) -> None:
    backend = "clear" if keys.public_key is None else "ckks"
    meta = {
        "backend": backend,
        "key_id": keys.key_id,
        "params": {k: getattr(keys.params, k) for k in _PARAM_FIELDS},
        "has_secret": bool(include_secret and keys.has_secret),
    }
    steps = keys.rotation_steps
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
              "steps": np.array(steps, dtype=np.int64)}
    if backend == "ckks":
        arrays["pk_b"], arrays["pk_a"] = keys.public_key
        if keys.relin_key is not None:
            arrays["relin_k0"], arrays["relin_k1"] = keys.relin_key
        if steps:
            arrays["rot_k0"] = np.stack([keys.rotation_keys[k][0] for k in steps])
            arrays["rot_k1"] = np.stack([keys.rotation_keys[k][1] for k in steps])
        if meta["has_secret"]:
            arrays["secret"] = keys.secret_key.coeffs
    elif meta["has_secret"]:
        arrays["secret"] = np.array([keys.secret_key], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_keys(path) -> tuple[str, KeyMaterial]:
    """Return ``(backend, keys)``; ``keys.secret_key`` is ``None`` for evaluation files."""
    with np.load(Path(path)) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        params = HeParams(**meta["params"])
        steps = [int(k) for k in z["steps"]]
        backend = meta["backend"]
        if backend == "clear":
            secret = int(z["secret"][0]) if meta["has_secret"] else None
            return backend, KeyMaterial(params, meta["key_id"], None, None, {k: None for k in steps}, secret)
        relin = (z["relin_k0"], z["relin_k1"]) if "relin_k0" in z else None
        rot = {k: (z["rot_k0"][i], z["rot_k1"][i]) for i, k in enumerate(steps)} if "rot_k0" in z else {}
        secret = None
        if meta["has_secret"]:
            coeffs = z["secret"]
            ctx = rns_context(params)
            secret = CkksSecret(coeffs=coeffs, rows=ctx.to_rows(coeffs, np.arange(ctx.primes.size, dtype=np.int64)))
        keys = KeyMaterial(params, meta["key_id"], (z["pk_b"], z["pk_a"]), relin, rot, secret)
    return backend, keys


def backend_from_keys(backend: str, keys: KeyMaterial, oracle_keys: KeyMaterial | None = None,
                      counters: OpCounters | None = None, strict: bool = False, seed: int = 0):
    """Build an evaluator. For CKKS without a secret, ``oracle_keys`` supplies the refresh oracle."""
    if backend == "clear":
        return ClearBackend(keys.params, keys=keys, counters=counters, strict=strict)
    oracle: RefreshOracle | bool = True
    if not keys.has_secret:
        oracle = RefreshOracle(oracle_keys) if oracle_keys is not None else False
    return CkksBackend(keys.params, keys=keys, seed=seed, counters=counters, strict=strict, refresh_oracle=oracle)


def require_evaluation_keys(keys: KeyMaterial, backend: str) -> None:
    """Raise :class:`MissingKeyError` unless relinearization and rotation keys are present."""
    if backend == "clear":
        return
    if keys.relin_key is None:
        raise MissingKeyError("evaluation keys lack a relinearization key")
    if not keys.rotation_keys:
        raise MissingKeyError("evaluation keys lack rotation keys")
