"""Chebyshev fitting and Paterson-Stockmeyer evaluation of scalar nonlinearities.

Fits use n+1 Chebyshev nodes on [a, b]. The series is evaluated as
P(t) = c_0/2 + Σ_{i≥1} c_i T_i(t) with t = (2x - a - b)/(b - a).

Homomorphic evaluation spends one level on the affine map to t and then
⌈log₂(n+1)⌉ levels on a recursive Chebyshev Paterson-Stockmeyer scheme:
the polynomial is split as q·T_m + r around the largest power of two m not
above its degree, until the pieces are cheap linear combinations of a
precomputed baby-step basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial import chebyshev as C

from .he.base import Backend, Ciphertext
from .he.errors import DepthExhaustedError

GRID_POINTS = 10_000


def clog2(x: int) -> int:
    return (x - 1).bit_length() if x > 0 else 0


@dataclass(frozen=True)
class ChebyshevApprox:
    a: float
    b: float
    degree: int
    coeffs: np.ndarray = field(repr=False)
    depth: int
    max_fit_error: float
    name: str = "f"

    @property
    def interval(self) -> tuple[float, float]:
        return self.a, self.b

    def series(self) -> np.ndarray:
        """Coefficients in numpy's Chebyshev convention (c_0 already halved)."""
        s = np.array(self.coeffs, dtype=np.float64)
        s[0] /= 2.0
        return s

    def to_unit(self, x):
        return (2.0 * np.asarray(x, dtype=np.float64) - self.a - self.b) / (self.b - self.a)

    def __call__(self, x) -> np.ndarray:
        """Plaintext evaluation by Clenshaw's recurrence."""
        return C.chebval(self.to_unit(x), self.series())

    def covers(self, x, slack: float = 0.0) -> bool:
        x = np.asarray(x)
        return bool(np.all((x >= self.a - slack) & (x <= self.b + slack)))


def approx_depth(n: int) -> int:
    return clog2(n + 1) + 1


def cheb_fit(f: Callable, a: float, b: float, n: int, name: str = "f") -> ChebyshevApprox:
    if not a < b:
        raise ValueError(f"interval must satisfy a < b, got [{a}, {b}]")
    if n < 1:
        raise ValueError("degree must be at least 1")
    K = n + 1
    j = np.arange(K)
    nodes = np.cos(np.pi * (j + 0.5) / K)
    with np.errstate(invalid="ignore", divide="ignore"):
        fx = np.asarray(f((b - a) / 2.0 * nodes + (a + b) / 2.0), dtype=np.float64)
    if not np.all(np.isfinite(fx)):
        bad = int(np.flatnonzero(~np.isfinite(fx))[0])
        raise ValueError(f"{name} is not finite at node {bad} (x = {(b - a) / 2 * nodes[bad] + (a + b) / 2})")
    i = np.arange(K)[:, None]
    coeffs = (2.0 / K) * (np.cos(i * np.pi * (j[None, :] + 0.5) / K) @ fx)
    proto = ChebyshevApprox(a, b, n, coeffs, approx_depth(n), 0.0, name)
    grid = np.linspace(a, b, GRID_POINTS)
    err = float(np.max(np.abs(proto(grid) - np.asarray(f(grid), dtype=np.float64))))
    return ChebyshevApprox(a, b, n, coeffs, approx_depth(n), err, name)


# -- Paterson-Stockmeyer plan ---------------------------------------------------------


@dataclass
class _Node:
    degree: int
    coeffs: np.ndarray  # Chebyshev series, numpy convention
    split: int = 0
    quotient: "_Node | None" = None
    remainder: "_Node | None" = None


def _divide(a: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Split Σ a_i T_i = q·T_m + r with deg r < m."""
    d = a.size - 1
    q = np.zeros(d - m + 1)
    q[0] = a[m]
    q[1:] = 2.0 * a[m + 1:]
    r = a[:m].copy()
    for k in range(1, m):
        if 2 * m - k <= d:
            r[k] -= a[2 * m - k]
    return q, r


def _build(a: np.ndarray, k: int, budget: int) -> _Node:
    d = a.size - 1
    if d == 0 or (d < k and clog2(d) + 1 <= budget):
        return _Node(d, a)
    m = 1 << (d.bit_length() - 1)
    if clog2(m) + 1 > budget:
        raise ValueError(f"degree {d} does not fit a depth budget of {budget}")
    q, r = _divide(a, m)
    return _Node(d, a, m, _build(q, k, budget - 1), _build(r, k, budget))


def _required_basis(root: _Node) -> set[int]:
    need: set[int] = set()

    def req(i: int) -> None:
        if i <= 1 or i in need:
            return
        need.add(i)
        if i & (i - 1) == 0:
            req(i // 2)
        else:
            hi = 1 << (clog2(i) - 1)
            req(hi)
            req(i - hi)
            req(hi - (i - hi))

    def walk(nd: _Node) -> None:
        if nd.split:
            req(nd.split)
            walk(nd.quotient)
            walk(nd.remainder)
        else:
            for i in range(2, nd.degree + 1):
                req(i)

    walk(root)
    return need


def _product_count(nd: _Node) -> int:
    if not nd.split:
        return 0
    own = 1 if nd.quotient.degree >= 1 else 0
    return own + _product_count(nd.quotient) + _product_count(nd.remainder)


@dataclass(frozen=True)
class PsPlan:
    baby: int
    budget: int
    root: _Node
    basis: frozenset

    @property
    def nonscalar_mults(self) -> int:
        return len(self.basis) + _product_count(self.root)


@lru_cache(maxsize=256)
def _plan_cached(key: bytes, degree: int, baby: int | None) -> PsPlan:
    a = np.frombuffer(key, dtype=np.float64).copy()
    budget = clog2(degree + 1)
    candidates = [baby] if baby else [2 ** e for e in range(1, max(2, clog2(degree + 1)) + 1)]
    best = None
    for k in candidates:
        root = _build(a, k, budget)
        plan = PsPlan(k, budget, root, frozenset(_required_basis(root)))
        if best is None or plan.nonscalar_mults < best.nonscalar_mults:
            best = plan
    return best


def ps_plan(approx: ChebyshevApprox, baby: int | None = None) -> PsPlan:
    return _plan_cached(approx.series().tobytes(), approx.degree, baby)


def ps_mult_bound(n: int) -> int:
    return 2 * math.ceil(math.sqrt(n + 1)) + clog2(n + 1)


# -- homomorphic evaluation -------------------------------------------------------------


class _Evaluator:
    def __init__(self, be: Backend, t: Ciphertext, live: int | None, tag: str | None):
        self.be = be
        self.tag = tag
        self.T: dict[int, Ciphertext] = {1: t}
        if live is None:
            self.mask = None
        else:
            self.mask = np.zeros(be.slot_count)
            self.mask[:live] = 1.0

    def const(self, c: float):
        return c if self.mask is None else c * self.mask

    def add_const(self, ct: Ciphertext, c: float) -> Ciphertext:
        return self.be.padd(ct, self.const(c), tag=self.tag)

    def basis(self, i: int) -> Ciphertext:
        got = self.T.get(i)
        if got is not None:
            return got
        be, tag = self.be, self.tag
        if i & (i - 1) == 0:
            h = self.basis(i // 2)
            sq = be.mult(h, h, tag=tag)
            out = self.add_const(be.add(sq, sq, tag=tag), -1.0)
        else:
            hi = 1 << (clog2(i) - 1)
            lo = i - hi
            prod = be.mult(self.basis(hi), self.basis(lo), tag=tag)
            prod = be.add(prod, prod, tag=tag)
            diff = hi - lo
            out = self.add_const(prod, -1.0) if diff == 0 else be.sub(prod, self.basis(diff), tag=tag)
        self.T[i] = out
        return out

    def node(self, nd: _Node):
        """Evaluate a plan node; returns a ciphertext or a float for constants."""
        be, tag = self.be, self.tag
        if not nd.split:
            c = nd.coeffs
            if nd.degree == 0:
                return float(c[0])
            acc = None
            for i in range(1, nd.degree + 1):
                term = be.pmult(self.basis(i), float(c[i]), tag=tag)
                acc = term if acc is None else be.add(acc, term, tag=tag)
            return self.add_const(acc, float(c[0])) if c[0] != 0.0 else acc
        q = self.node(nd.quotient)
        tm = self.basis(nd.split)
        if isinstance(q, float):
            prod = be.pmult(tm, q, tag=tag)
        else:
            prod = be.mult(q, tm, tag=tag)
        r = self.node(nd.remainder)
        if isinstance(r, float):
            return self.add_const(prod, r) if r != 0.0 else prod
        return be.add(prod, r, tag=tag)


def ps_eval(be: Backend, ct: Ciphertext, approx: ChebyshevApprox, live: int | None = None,
            baby: int | None = None, tag: str | None = None) -> Ciphertext:
    """Evaluate ``approx`` slotwise on ``ct``; consumes exactly ``approx.depth`` levels.

    With ``live`` set, the affine map and every additive constant are masked
    to slots [0, live), so padding slots evaluate to exactly zero.
    """
    tag = tag or approx.name
    if ct.level < approx.depth:
        raise DepthExhaustedError(
            f"{approx.name}: degree-{approx.degree} evaluation needs {approx.depth} levels, "
            f"ciphertext tagged {ct.tag!r} has {ct.level}")
    plan = ps_plan(approx, baby)
    alpha = 2.0 / (approx.b - approx.a)
    beta = -(approx.a + approx.b) / (approx.b - approx.a)
    ev = _Evaluator(be, ct, live, tag)
    t = be.pmult(ct, ev.const(alpha), tag=tag)
    if beta != 0.0:
        t = ev.add_const(t, beta)
    ev.T[1] = t
    for i in sorted(plan.basis):
        ev.basis(i)
    out = ev.node(plan.root)
    if isinstance(out, float):
        out = ev.add_const(be.pmult(t, 0.0, tag=tag), out)
    # Pad to the declared depth so the level ledger is exact for every degree.
    while out.depth - ct.depth < approx.depth:
        out = be.pmult(out, ev.const(1.0), tag=tag)
    return out


# -- scalar protocols ----------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


DEFAULT_DEGREE = 59
DEFAULT_DOMAINS = {
    "sigmoid": (-16.0, 16.0),
    "silu": (-16.0, 16.0),
    "sqrt": (0.01, 10.0),
    "inverse": (0.01, 10.0),
}


@lru_cache(maxsize=256)
def fit_sigmoid(bias: float = 0.0, domain: tuple[float, float] = DEFAULT_DOMAINS["sigmoid"],
                degree: int = DEFAULT_DEGREE) -> ChebyshevApprox:
    return cheb_fit(lambda x: sigmoid(np.asarray(x) + bias), *domain, degree, name="sigmoid")


@lru_cache(maxsize=256)
def fit_sqrt(domain: tuple[float, float] = DEFAULT_DOMAINS["sqrt"], degree: int = DEFAULT_DEGREE) -> ChebyshevApprox:
    if domain[0] <= 0:
        raise ValueError(f"sqrt domain must exclude zero, got {domain}")
    return cheb_fit(np.sqrt, *domain, degree, name="sqrt")


@lru_cache(maxsize=256)
def fit_inverse(domain: tuple[float, float] = DEFAULT_DOMAINS["inverse"],
                degree: int = DEFAULT_DEGREE) -> ChebyshevApprox:
    if domain[0] <= 0:
        raise ValueError(f"inverse domain must exclude zero, got {domain}")
    return cheb_fit(lambda x: 1.0 / np.asarray(x), *domain, degree, name="inverse")


def sigmoid_ct(be: Backend, ct: Ciphertext, bias: float = 0.0,
               domain: tuple[float, float] = DEFAULT_DOMAINS["sigmoid"], degree: int = DEFAULT_DEGREE,
               live: int | None = None, tag: str | None = "sigmoid") -> Ciphertext:
    """σ(x + bias), with the bias folded into the fitted function (no extra level)."""
    return ps_eval(be, ct, fit_sigmoid(float(bias), tuple(domain), degree), live=live, tag=tag)


def silu_ct(be: Backend, ct: Ciphertext, domain: tuple[float, float] = DEFAULT_DOMAINS["silu"],
            degree: int = DEFAULT_DEGREE, live: int | None = None, tag: str | None = "silu") -> Ciphertext:
    """x ⊠ σ(x): the sigmoid depth plus one level."""
    sig = sigmoid_ct(be, ct, 0.0, domain, degree, live=live, tag=tag)
    return be.mult(ct, sig, tag=tag)


def silu_depth(degree: int = DEFAULT_DEGREE) -> int:
    return approx_depth(degree) + 1


def sqrt_ct(be: Backend, ct: Ciphertext, domain: tuple[float, float] = DEFAULT_DOMAINS["sqrt"],
            degree: int = DEFAULT_DEGREE, live: int | None = None, tag: str | None = "sqrt") -> Ciphertext:
    return ps_eval(be, ct, fit_sqrt(tuple(domain), degree), live=live, tag=tag)


def inverse_ct(be: Backend, ct: Ciphertext, domain: tuple[float, float] = DEFAULT_DOMAINS["inverse"],
               degree: int = DEFAULT_DEGREE, live: int | None = None, tag: str | None = "inverse") -> Ciphertext:
    return ps_eval(be, ct, fit_inverse(tuple(domain), degree), live=live, tag=tag)


@dataclass(frozen=True)
class ApproxProfile:
    """Degree and domain of one protocol's polynomial."""

    degree: int = DEFAULT_DEGREE
    domain: tuple[float, float] = (-16.0, 16.0)

    @property
    def depth(self) -> int:
        return approx_depth(self.degree)
