"""Value types and the backend interface shared by the clear and CKKS backends."""

from __future__ import annotations

import contextlib
import functools
import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Sequence

import numpy as np

from ..runtime import OpCounters
from .errors import (DepthExhaustedError, KeyMismatchError, RefreshDisabledError, SlotMismatchError)
from .params import HeParams


@dataclass(frozen=True)
class Plaintext:
    """An encoded slot vector. ``body`` holds the backend representation."""

    slots: np.ndarray
    level: int
    scale: float
    body: Any = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class Ciphertext:
    """An encrypted slot vector with its level and scale metadata.

    ``depth`` is the multiplicative depth of the longest path that produced
    this value. Alignment drops and refreshes leave it unchanged, so the
    level ledger can difference it across a stage.
    """

    body: Any = field(repr=False)
    level: int
    scale: float
    slot_count: int
    key_id: str
    depth: int = 0
    noise: float = 0.0
    tag: str | None = None

    def with_tag(self, tag: str | None) -> "Ciphertext":
        return replace(self, tag=tag)


@dataclass(frozen=True)
class KeyMaterial:
    """Keys for one backend instance.

    ``secret_key`` is ``None`` for an evaluation-only view (the server side).
    ``rotation_keys`` maps a signed rotation step to its key.
    """

    params: HeParams
    key_id: str
    public_key: Any = field(repr=False)
    relin_key: Any = field(repr=False)
    rotation_keys: dict = field(repr=False)
    secret_key: Any = field(default=None, repr=False)

    @property
    def has_secret(self) -> bool:
        return self.secret_key is not None

    def public_view(self) -> "KeyMaterial":
        return replace(self, secret_key=None)

    @property
    def rotation_steps(self) -> list[int]:
        return sorted(self.rotation_keys)


def power_of_two_steps(slot_count: int) -> list[int]:
    steps = []
    k = 1
    while k < slot_count:
        steps += [k, -k]
        k <<= 1
    return steps


@functools.lru_cache(maxsize=4096)
def decompose_rotation(k: int, slot_count: int) -> tuple[int, ...]:
    """Split a rotation into keyed power-of-two steps (signed binary, shortest direction)."""
    k %= slot_count
    if k == 0:
        return ()
    sign = 1
    if k > slot_count // 2:
        k = slot_count - k
        sign = -1
    steps = []
    bit = 1
    while k:
        if k & 1:
            steps.append(sign * bit)
        k >>= 1
        bit <<= 1
    return tuple(steps)


class Backend(ABC):
    """Slot-level homomorphic evaluator bound to one set of keys.

    Every public operation increments exactly one counter (rotations count
    one per keyed step). Binary operations first bring both operands to the
    lower level. ``strict`` mode forbids :meth:`refresh` outside an
    :meth:`allow_refresh` scope.
    """

    name = "abstract"

    def __init__(self, params: HeParams, keys: KeyMaterial, counters: OpCounters | None = None,
                 strict: bool = False):
        self.params = params
        self.keys = keys
        self.counters = counters if counters is not None else OpCounters()
        self.strict = strict
        self._refresh_scope = threading.local()

    # -- bookkeeping ---------------------------------------------------------
    @property
    def slot_count(self) -> int:
        return self.params.slot_count

    @property
    def key_id(self) -> str:
        return self.keys.key_id

    def _count(self, op: str, tag: str | None, n: int = 1) -> None:
        self.counters.bump(op, n, tag)

    @contextlib.contextmanager
    def allow_refresh(self) -> Iterator[None]:
        depth = getattr(self._refresh_scope, "depth", 0)
        self._refresh_scope.depth = depth + 1
        try:
            yield
        finally:
            self._refresh_scope.depth = depth

    @contextlib.contextmanager
    def strict_mode(self, on: bool = True) -> Iterator[None]:
        prev = self.strict
        self.strict = on
        try:
            yield
        finally:
            self.strict = prev

    def _check_refresh_allowed(self, ct: Ciphertext) -> None:
        if self.strict and not getattr(self._refresh_scope, "depth", 0):
            raise RefreshDisabledError(
                f"refresh requested outside an allowed scope in strict mode (tag={ct.tag!r})")

    def _check_key(self, *cts: Ciphertext) -> None:
        for ct in cts:
            if ct.key_id != self.key_id:
                raise KeyMismatchError(
                    f"ciphertext key_id {ct.key_id} does not match backend key_id {self.key_id}")

    def _check_slots(self, a: Ciphertext, b: Ciphertext) -> None:
        if a.slot_count != b.slot_count:
            raise SlotMismatchError(f"slot_count mismatch: {a.slot_count} vs {b.slot_count}")

    def _need_level(self, ct: Ciphertext, n: int = 1, what: str = "mult") -> None:
        if ct.level < n:
            raise DepthExhaustedError(
                f"{what} needs level >= {n}, ciphertext tagged {ct.tag!r} is at level {ct.level}")

    def _slots_vector(self, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64).ravel()
        if arr.size > self.slot_count:
            raise SlotMismatchError(f"vector of length {arr.size} exceeds slot count {self.slot_count}")
        out = np.zeros(self.slot_count)
        out[: arr.size] = arr
        return out

    # -- encoding ------------------------------------------------------------
    def encode(self, v, level: int | None = None, scale: float | None = None) -> Plaintext:
        level = self.params.max_level if level is None else level
        if not 0 <= level <= self.params.max_level:
            raise DepthExhaustedError(f"cannot encode at level {level}")
        scale = self.params.scale_at(level) if scale is None else float(scale)
        if not scale > 0:
            raise ValueError("scale must be positive")
        slots = self._slots_vector(v)
        self._count("encode", None)
        return Plaintext(slots=slots, level=level, scale=scale, body=self._encode_body(slots, level, scale))

    def decode(self, pt: Plaintext) -> np.ndarray:
        return pt.slots.copy()

    def encrypt(self, pt, level: int | None = None, tag: str | None = None) -> Ciphertext:
        if not isinstance(pt, Plaintext):
            pt = self.encode(pt, level=level)
        if pt.level < 0 or pt.level > self.params.max_level:
            raise DepthExhaustedError(f"cannot encrypt at level {pt.level}")
        self._count("encrypt", tag)
        return self._encrypt(pt, tag)

    def encrypt_vector(self, v, level: int | None = None, tag: str | None = None) -> Ciphertext:
        return self.encrypt(self.encode(v, level=level), tag=tag)

    def decrypt(self, ct: Ciphertext) -> np.ndarray:
        self._check_key(ct)
        return self._decrypt(ct)

    # -- arithmetic ----------------------------------------------------------
    def align(self, a: Ciphertext, b: Ciphertext) -> tuple[Ciphertext, Ciphertext]:
        self._check_key(a, b)
        self._check_slots(a, b)
        lvl = min(a.level, b.level)
        return self.drop_to(a, lvl), self.drop_to(b, lvl)

    def drop_to(self, ct: Ciphertext, level: int) -> Ciphertext:
        """Bring ``ct`` down to ``level`` at that level's canonical scale (free, uncounted)."""
        if level > ct.level:
            raise ValueError(f"cannot raise level {ct.level} to {level}")
        if level == ct.level:
            return ct
        return self._drop_to(ct, level)

    def add(self, a: Ciphertext, b: Ciphertext, tag: str | None = None) -> Ciphertext:
        a, b = self.align(a, b)
        self._count("add", tag or a.tag)
        return self._add(a, b, tag or a.tag)

    def sub(self, a: Ciphertext, b: Ciphertext, tag: str | None = None) -> Ciphertext:
        a, b = self.align(a, b)
        self._count("sub", tag or a.tag)
        return self._sub(a, b, tag or a.tag)

    def neg(self, a: Ciphertext, tag: str | None = None) -> Ciphertext:
        self._check_key(a)
        self._count("sub", tag or a.tag)
        return self._neg(a, tag or a.tag)

    def padd(self, a: Ciphertext, v, tag: str | None = None) -> Ciphertext:
        """Add a plaintext vector or scalar."""
        self._check_key(a)
        self._count("add", tag or a.tag)
        if np.isscalar(v):
            return self._add_scalar(a, float(v), tag or a.tag)
        if isinstance(v, Plaintext):
            v = v.slots
        return self._add_plain(a, self._slots_vector(v), tag or a.tag)

    def mult(self, a: Ciphertext, b: Ciphertext, tag: str | None = None) -> Ciphertext:
        a, b = self.align(a, b)
        self._need_level(a, 1, "mult")
        self._count("mult", tag or a.tag)
        return self._mult(a, b, tag or a.tag)

    def square(self, a: Ciphertext, tag: str | None = None) -> Ciphertext:
        return self.mult(a, a, tag)

    def dot(self, xs: Sequence[Ciphertext], ys: Sequence[Ciphertext], tag: str | None = None) -> Ciphertext:
        """Σ xs[i] ⊠ ys[i] with a single relinearization and rescale.

        Counts len(xs) mults and len(xs)-1 adds, exactly as the unfused
        evaluation would.
        """
        if len(xs) != len(ys) or not xs:
            raise ValueError("dot needs two equal-length, non-empty operand lists")
        lvl = min(c.level for c in list(xs) + list(ys))
        xs = [self.drop_to(c, lvl) for c in xs]
        ys = [self.drop_to(c, lvl) for c in ys]
        self._check_key(*xs, *ys)
        for c in list(xs[1:]) + list(ys):
            self._check_slots(xs[0], c)
        self._need_level(xs[0], 1, "mult")
        tag = tag or xs[0].tag
        self._count("mult", tag, len(xs))
        if len(xs) > 1:
            self._count("add", tag, len(xs) - 1)
        return self._dot(xs, ys, tag)

    def pmult(self, a: Ciphertext, v, tag: str | None = None) -> Ciphertext:
        """Multiply by a plaintext vector or scalar; the result lands on the canonical scale one level down."""
        self._check_key(a)
        self._need_level(a, 1, "pmult")
        self._count("pmult", tag or a.tag)
        if np.isscalar(v):
            return self._mult_scalar(a, float(v), tag or a.tag)
        if isinstance(v, Plaintext):
            v = v.slots
        return self._mult_plain(a, self._slots_vector(v), tag or a.tag)

    def rotate(self, a: Ciphertext, k: int, tag: str | None = None) -> Ciphertext:
        """Cyclic left shift by k slots (negative k shifts right)."""
        self._check_key(a)
        out = a
        for step in decompose_rotation(int(k), self.slot_count):
            self._count("rot", tag or a.tag)
            out = self._rotate_step(out, step, tag or a.tag)
        return out

    def refresh(self, a: Ciphertext, tag: str | None = None) -> Ciphertext:
        """Reset the level to L - K, preserving slot values."""
        self._check_key(a)
        self._check_refresh_allowed(a)
        self._count("refresh", tag or a.tag)
        return self._refresh(a, tag or a.tag)

    # -- backend hooks -------------------------------------------------------
    @abstractmethod
    def _encode_body(self, slots: np.ndarray, level: int, scale: float) -> Any: ...

    @abstractmethod
    def _encrypt(self, pt: Plaintext, tag: str | None) -> Ciphertext: ...

    @abstractmethod
    def _decrypt(self, ct: Ciphertext) -> np.ndarray: ...

    @abstractmethod
    def _drop_to(self, ct: Ciphertext, level: int) -> Ciphertext: ...

    @abstractmethod
    def _add(self, a, b, tag): ...

    @abstractmethod
    def _sub(self, a, b, tag): ...

    @abstractmethod
    def _neg(self, a, tag): ...

    @abstractmethod
    def _add_scalar(self, a, c: float, tag): ...

    @abstractmethod
    def _add_plain(self, a, v: np.ndarray, tag): ...

    @abstractmethod
    def _mult(self, a, b, tag): ...

    @abstractmethod
    def _dot(self, xs, ys, tag): ...

    @abstractmethod
    def _mult_scalar(self, a, c: float, tag): ...

    @abstractmethod
    def _mult_plain(self, a, v: np.ndarray, tag): ...

    @abstractmethod
    def _rotate_step(self, a, step: int, tag): ...

    @abstractmethod
    def _refresh(self, a, tag): ...

    @abstractmethod
    def evaluation_view(self) -> "Backend":
        """A backend sharing the counters-free public keys, unable to decrypt."""


def nominal_scale_exponent(scale: float) -> int:
    return int(round(math.log2(scale)))
