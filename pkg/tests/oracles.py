"""Independent plaintext oracles shared by the test modules."""

from fractions import Fraction

import numpy as np


def cheb_to_monomial_exact(series) -> list[Fraction]:
    """Monomial coefficients of Σ c_k T_k(t), computed in exact rational arithmetic."""
    n = len(series)
    T = [[Fraction(1)], [Fraction(0), Fraction(1)]]
    for k in range(2, n):
        prev, prev2 = T[k - 1], T[k - 2]
        nxt = [Fraction(0)] + [2 * c for c in prev]
        for i, c in enumerate(prev2):
            nxt[i] -= c
        T.append(nxt)
    out = [Fraction(0)] * n
    for k, c in enumerate(series):
        ck = Fraction(float(c))
        for i, t in enumerate(T[k]):
            out[i] += ck * t
    return out


def horner_exact(monomial: list[Fraction], t: float) -> float:
    x = Fraction(float(t))
    acc = Fraction(0)
    for c in reversed(monomial):
        acc = acc * x + c
    return float(acc)


def horner_oracle(approx, xs) -> np.ndarray:
    """Evaluate a fitted polynomial at ``xs`` by exact Horner on the unit interval."""
    mono = cheb_to_monomial_exact(approx.series())
    return np.array([horner_exact(mono, t) for t in approx.to_unit(xs)])
