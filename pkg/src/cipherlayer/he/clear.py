"""Exact plaintext backend: the oracle for every kernel.

Slots are float64 vectors. Levels, scales, depths and counters follow the
same rules as the CKKS backend, so pipelines produce identical ledgers on
both.
"""

from __future__ import annotations

import hashlib
from dataclasses import replace

import numpy as np

from ..runtime import OpCounters
from .base import Backend, Ciphertext, KeyMaterial, Plaintext, power_of_two_steps
from .errors import MissingKeyError
from .params import HeParams


def clear_keygen(params: HeParams, seed: int = 0) -> KeyMaterial:
    digest = hashlib.sha256(f"clear|{params.ring_degree}|{params.max_level}|{params.refresh_cost}|{seed}".encode())
    key_id = digest.hexdigest()[:16]
    steps = {k: None for k in power_of_two_steps(params.slot_count)}
    return KeyMaterial(params=params, key_id=key_id, public_key=None, relin_key=None,
                       rotation_keys=steps, secret_key=seed)


class ClearBackend(Backend):
    name = "clear"

    def __init__(self, params: HeParams, keys: KeyMaterial | None = None, seed: int = 0,
                 counters: OpCounters | None = None, strict: bool = False):
        super().__init__(params, keys if keys is not None else clear_keygen(params, seed), counters, strict)

    def evaluation_view(self) -> "ClearBackend":
        return ClearBackend(self.params, self.keys.public_view(), counters=self.counters, strict=self.strict)

    def _ct(self, slots, level, scale, depth, tag) -> Ciphertext:
        return Ciphertext(body=slots, level=level, scale=scale, slot_count=self.slot_count,
                          key_id=self.key_id, depth=depth, tag=tag)

    def _encode_body(self, slots, level, scale):
        return None

    def _encrypt(self, pt: Plaintext, tag):
        return self._ct(pt.slots.copy(), pt.level, pt.scale, 0, tag)

    def _decrypt(self, ct):
        if not self.keys.has_secret:
            raise MissingKeyError("this backend view holds no secret key")
        return ct.body.copy()

    def _drop_to(self, ct, level):
        return replace(ct, level=level, scale=self.params.scale_at(level))

    def _add(self, a, b, tag):
        return self._ct(a.body + b.body, a.level, a.scale, max(a.depth, b.depth), tag)

    def _sub(self, a, b, tag):
        return self._ct(a.body - b.body, a.level, a.scale, max(a.depth, b.depth), tag)

    def _neg(self, a, tag):
        return self._ct(-a.body, a.level, a.scale, a.depth, tag)

    def _add_scalar(self, a, c, tag):
        return self._ct(a.body + c, a.level, a.scale, a.depth, tag)

    def _add_plain(self, a, v, tag):
        return self._ct(a.body + v, a.level, a.scale, a.depth, tag)

    def _down(self, a):
        return a.level - 1, self.params.scale_at(a.level - 1), a.depth + 1

    def _mult(self, a, b, tag):
        lvl, sc, _ = self._down(a)
        return self._ct(a.body * b.body, lvl, sc, max(a.depth, b.depth) + 1, tag)

    def _dot(self, xs, ys, tag):
        acc = xs[0].body * ys[0].body
        for x, y in zip(xs[1:], ys[1:]):
            acc = acc + x.body * y.body
        lvl, sc, _ = self._down(xs[0])
        return self._ct(acc, lvl, sc, max(c.depth for c in list(xs) + list(ys)) + 1, tag)

    def _mult_scalar(self, a, c, tag):
        lvl, sc, dp = self._down(a)
        return self._ct(a.body * c, lvl, sc, dp, tag)

    def _mult_plain(self, a, v, tag):
        lvl, sc, dp = self._down(a)
        return self._ct(a.body * v, lvl, sc, dp, tag)

    def _rotate_step(self, a, step, tag):
        k = step % a.body.size
        return self._ct(np.concatenate([a.body[k:], a.body[:k]]), a.level, a.scale, a.depth, tag)

    def _refresh(self, a, tag):
        lvl = self.params.refresh_level
        return self._ct(a.body.copy(), lvl, self.params.scale_at(lvl), a.depth, tag)
