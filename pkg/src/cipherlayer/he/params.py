"""Parameter sets for the homomorphic backends.

All presets here are toy parameters. They are chosen for speed and
numerical headroom, not for any lattice security level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

from sympy import isprime

from .errors import ParamError

SECURITY_NOTE = "toy parameters: NOT secure, for functional testing only"


@lru_cache(maxsize=None)
def ntt_primes_near(target: float, modulus_step: int, count: int, exclude: tuple[int, ...] = ()) -> tuple[int, ...]:
    """Primes p ≡ 1 (mod modulus_step), ordered by distance to ``target``."""
    centre = int(round(target)) // modulus_step * modulus_step + 1
    found: list[int] = []
    lo, hi = centre, centre + modulus_step
    while len(found) < count:
        for cand in (lo, hi):
            if cand > 2 and cand not in exclude and cand not in found and isprime(cand):
                found.append(cand)
        lo -= modulus_step
        hi += modulus_step
    return tuple(found[:count])


def _build_chain(ring_degree: int, max_level: int, scale_bits: int, base_bits: int, special_bits: int,
                 num_special: int) -> tuple[tuple[int, ...], tuple[int, ...], tuple[float, ...]]:
    """Pick the modulus chain and the canonical per-level scales.

    Rescale primes are chosen greedily from the top level down, each as the
    unused prime closest to the current level scale, so that the scale
    recurrence Δ_{l-1} = Δ_l² / q_l stays within a hair of 2^scale_bits.
    """
    step = 2 * ring_degree
    used: list[int] = []
    scales = [0.0] * (max_level + 1)
    primes = [0] * (max_level + 1)
    scales[max_level] = float(2 ** scale_bits)
    for level in range(max_level, 0, -1):
        (q,) = ntt_primes_near(scales[level], step, 1, tuple(used))
        used.append(q)
        primes[level] = q
        scales[level - 1] = scales[level] * (scales[level] / q)
    (q0,) = ntt_primes_near(2.0 ** base_bits, step, 1, tuple(used))
    used.append(q0)
    primes[0] = q0
    special = ntt_primes_near(2.0 ** special_bits, step, num_special, tuple(used))
    return tuple(primes), tuple(special), tuple(scales)


@dataclass(frozen=True)
class HeParams:
    """Ring and level parameters shared by both backends.

    ``slot_count`` is ``ring_degree // 2``. A refresh re-enters the chain at
    ``max_level - refresh_cost``.
    """

    ring_degree: int
    max_level: int
    refresh_cost: int
    scale_bits: int = 40
    base_bits: int = 49
    special_bits: int = 49
    num_special: int | None = None
    sigma: float = 3.2
    secret_weight: int = 64
    security_note: str = SECURITY_NOTE
    modulus_chain: tuple[int, ...] = field(init=False, repr=False, compare=False)
    special_primes: tuple[int, ...] = field(init=False, repr=False, compare=False)
    level_scales: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = self.ring_degree
        if n < 4 or n & (n - 1):
            raise ParamError(f"ring_degree must be a power of two >= 4, got {n}")
        if self.max_level < 1:
            raise ParamError(f"max_level must be positive, got {self.max_level}")
        if not 0 < self.refresh_cost < self.max_level:
            raise ParamError(
                f"refresh_cost must satisfy 0 < K < L, got K={self.refresh_cost}, L={self.max_level}")
        if not 20 <= self.scale_bits <= 45 or self.base_bits > 49 or self.special_bits > 49:
            raise ParamError("scale_bits must be in [20, 45]; base/special primes must stay below 2^50")
        if self.base_bits <= self.scale_bits:
            raise ParamError("base_bits must exceed scale_bits to leave decryption headroom")
        special = self.num_special
        if special is None:
            special = max(1, math.ceil((self.max_level + 1) / 3))
            object.__setattr__(self, "num_special", special)
        chain, sp, scales = _build_chain(n, self.max_level, self.scale_bits, self.base_bits,
                                         self.special_bits, special)
        object.__setattr__(self, "modulus_chain", chain)
        object.__setattr__(self, "special_primes", sp)
        object.__setattr__(self, "level_scales", scales)

    @property
    def slot_count(self) -> int:
        return self.ring_degree // 2

    @property
    def initial_scale(self) -> float:
        return float(2 ** self.scale_bits)

    @property
    def refresh_level(self) -> int:
        return self.max_level - self.refresh_cost

    def scale_at(self, level: int) -> float:
        return self.level_scales[level]

    def describe(self) -> dict:
        return {
            "ring_degree": self.ring_degree,
            "slot_count": self.slot_count,
            "max_level": self.max_level,
            "refresh_cost": self.refresh_cost,
            "scale_bits": self.scale_bits,
            "modulus_chain_bits": [round(math.log2(q), 2) for q in self.modulus_chain],
            "special_primes": len(self.special_primes),
            "security_note": self.security_note,
        }


def toy_params(ring_degree: int = 2 ** 12, max_level: int = 4, refresh_cost: int = 1, **kw) -> HeParams:
    return HeParams(ring_degree=ring_degree, max_level=max_level, refresh_cost=refresh_cost, **kw)


# Level budget the layer used in the paper (L = 48, K = 20). Large ring sizes
# are reachable but slow in this implementation; tests use the smaller presets.
PRESETS = {
    "tiny": dict(ring_degree=2 ** 5, max_level=3, refresh_cost=1),
    "toy": dict(ring_degree=2 ** 12, max_level=4, refresh_cost=1),
    "layer": dict(ring_degree=2 ** 13, max_level=40, refresh_cost=2),
    "paper": dict(ring_degree=2 ** 14, max_level=48, refresh_cost=20),
}


def preset(name: str, **overrides) -> HeParams:
    try:
        kw = dict(PRESETS[name])
    except KeyError:
        raise ParamError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    kw.update(overrides)
    return HeParams(**kw)
