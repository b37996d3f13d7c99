"""Encrypted matrix kernels over column-packed operands.

* :func:`pcmm` multiplies by a ternary plaintext matrix using only
  ciphertext additions and subtractions.
* :func:`ccmm` multiplies two encrypted matrices as a sum of outer
  products. Each right-hand element is isolated with a mask and broadcast
  across the rows by repeated doubling (:func:`extract_broadcast`).
* :func:`hadamard_pc` / :func:`hadamard_cc` are slotwise products per column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .he.base import Backend, Ciphertext
from .packing import PackedMatrix, TernaryMatrix, from_columns, relevel


class Orientation(str, Enum):
    DIRECT = "direct"
    TRANSPOSED = "transposed"


@dataclass(frozen=True)
class ElementAccessor:
    """Addresses element (j, i) of a right-hand operand B stored as a packed matrix.

    DIRECT: B itself is packed, B[j, i] sits in slot j of cols[i].
    TRANSPOSED: B = Kᵀ with K packed, B[j, i] sits in slot i of cols[j].
    """

    source: PackedMatrix
    orientation: Orientation = Orientation.DIRECT

    @property
    def shape(self) -> tuple[int, int]:
        s, d = self.source.shape
        return (s, d) if self.orientation == Orientation.DIRECT else (d, s)

    def resolve(self, j: int, i: int) -> tuple[int, int]:
        rows, cols = self.shape
        if not (0 <= j < rows and 0 <= i < cols):
            raise IndexError(f"element ({j}, {i}) outside a {rows}x{cols} operand")
        if self.orientation == Orientation.DIRECT:
            return i, j
        return j, i

    def element(self, j: int, i: int) -> tuple[Ciphertext, int]:
        c, slot = self.resolve(j, i)
        return self.source.cols[c], slot


def pcmm(be: Backend, X: PackedMatrix, W: TernaryMatrix, tag: str | None = "pcmm") -> PackedMatrix:
    """Y = X·W for ternary W (d×m) with additions and subtractions only.

    Output column i starts from its first +1 term and then adds or subtracts
    the remaining nonzero terms in ascending j. A column with only -1 terms
    starts from a negation; an all-zero column is x_0 ⊟ x_0.
    """
    d, m = W.shape
    if X.cols_n != d:
        raise ValueError(f"pcmm dimension mismatch: X has {X.cols_n} columns, W has {d} rows")
    X = relevel(be, X)
    out = []
    for i in range(m):
        col = W.entries[:, i]
        nz = [j for j in range(d) if col[j] != 0]
        if not nz:
            out.append(be.sub(X.cols[0], X.cols[0], tag=tag))
            continue
        pos = [j for j in nz if col[j] > 0]
        first = pos[0] if pos else nz[0]
        acc = X.cols[first] if col[first] > 0 else be.neg(X.cols[first], tag=tag)
        for j in nz:
            if j == first:
                continue
            acc = be.add(acc, X.cols[j], tag=tag) if col[j] > 0 else be.sub(acc, X.cols[j], tag=tag)
        out.append(acc.with_tag(tag) if tag else acc)
    return from_columns(out, X.rows)


def extraction_span(slot: int, span: int) -> int:
    """Span actually filled: the doubling fill needs the source slot inside [0, 2^t)."""
    return max(span, slot + 1)


def extract_broadcast(be: Backend, ct: Ciphertext, slot: int, span: int, scale_fold: float = 1.0,
                      naive: bool = False, tag: str | None = None) -> Ciphertext:
    """Replicate slot ``slot`` of ``ct`` into slots 0..span-1.

    One masking pmult (which also absorbs ``scale_fold``) followed by
    ⌈log₂ span⌉ keyed rotations and additions. Step k rotates by +2^k when
    bit k of ``slot`` is set and by -2^k otherwise, so after t steps the
    copies occupy exactly [0, 2^t). ``naive`` uses span-1 unit rotations.
    """
    n = be.slot_count
    if not 0 <= slot < n or not 1 <= span <= n:
        raise ValueError(f"slot {slot} / span {span} out of range for {n} slots")
    span = extraction_span(slot, span)
    mask = np.zeros(n)
    mask[slot] = scale_fold
    masked = be.pmult(ct, mask, tag=tag)
    if naive:
        acc = masked
        cur = masked
        for _ in range(slot):
            cur = be.rotate(cur, 1, tag=tag)
            acc = be.add(acc, cur, tag=tag)
        cur = masked
        for _ in range(span - 1 - slot):
            cur = be.rotate(cur, -1, tag=tag)
            acc = be.add(acc, cur, tag=tag)
        return acc
    acc = masked
    for k in range(math.ceil(math.log2(span)) if span > 1 else 0):
        step = (1 << k) if (slot >> k) & 1 else -(1 << k)
        acc = be.add(acc, be.rotate(acc, step, tag=tag), tag=tag)
    return acc


def ccmm(be: Backend, A: PackedMatrix, B: ElementAccessor, scale_fold: float | None = None,
         naive: bool = False, tag: str | None = "ccmm") -> PackedMatrix:
    """C = A·B for encrypted A (s×d) and B (d×m), as Σ_j a_j ⊗ B[j, :].

    Column i is Σ_j a_j ⊠ extract_broadcast(B[j, i]), accumulated in
    ascending j with one relinearization per column. ``scale_fold`` rides
    on the extraction masks. Consumes two levels.
    """
    s, d = A.shape
    bd, m = B.shape
    if bd != d:
        raise ValueError(f"ccmm dimension mismatch: A is {s}x{d}, B is {bd}x{m}")
    fold = 1.0 if scale_fold is None else float(scale_fold)
    b_level = B.source.level
    out_level = min(A.level, b_level - 1)
    if out_level < 1:
        raise_depth(f"ccmm needs 2 levels; A at {A.level}, B at {b_level}", tag)
    A = relevel(be, A, out_level)
    cols = []
    for i in range(m):
        ext = []
        for j in range(d):
            ct, slot = B.element(j, i)
            ext.append(extract_broadcast(be, ct, slot, s, fold, naive=naive, tag=tag))
        cols.append(be.dot(list(A.cols), ext, tag=tag))
    return from_columns(cols, s)


def raise_depth(message: str, tag: str | None):
    from .he.errors import DepthExhaustedError

    raise DepthExhaustedError(f"{message} (stage {tag!r})")


def hadamard_pc(be: Backend, pm: PackedMatrix, v, tag: str | None = "hadamard") -> PackedMatrix:
    """Slotwise product with a plaintext: ``v`` is a length-s vector or an s×d matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        if v.size != pm.rows:
            raise ValueError(f"vector of length {v.size} does not match {pm.rows} rows")
        vs = [v] * pm.cols_n
    else:
        if v.shape != pm.shape:
            raise ValueError(f"plaintext shape {v.shape} does not match {pm.shape}")
        vs = [v[:, j] for j in range(pm.cols_n)]
    return from_columns([be.pmult(c, vj, tag=tag) for c, vj in zip(pm.cols, vs)], pm.rows)


def hadamard_cc(be: Backend, a: PackedMatrix, b: PackedMatrix, tag: str | None = "hadamard") -> PackedMatrix:
    if a.shape != b.shape:
        raise ValueError(f"hadamard shapes differ: {a.shape} vs {b.shape}")
    return from_columns([be.mult(x, y, tag=tag) for x, y in zip(a.cols, b.cols)], a.rows)


def expected_ccmm_rotations(s: int, d: int, m: int, orientation: Orientation, naive: bool = False) -> int:
    """Keyed rotations ccmm issues for the given shape (see :func:`extraction_span`)."""
    total = 0
    for j in range(d):
        for i in range(m):
            slot = j if orientation == Orientation.DIRECT else i
            span = extraction_span(slot, s)
            total += (span - 1) if naive else (math.ceil(math.log2(span)) if span > 1 else 0)
    return total
