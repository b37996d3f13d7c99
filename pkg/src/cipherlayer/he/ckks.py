"""Leveled RNS-CKKS backend.

Ciphertexts are pairs of polynomials kept in NTT form, one row per prime of
the current level. Each multiplication is followed by one rescale; key
switching is the hybrid (digit-decomposed, special-modulus) variant. The
refresh operation is a trusted decrypt-and-re-encrypt oracle standing in for
bootstrapping.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from ..runtime import OpCounters
from . import _kernels as K
from .base import Backend, Ciphertext, KeyMaterial, Plaintext, power_of_two_steps
from .errors import MissingKeyError, ParamError, RefreshDisabledError
from .params import HeParams

U64 = np.uint64


def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    out = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        out |= ((idx >> b) & 1) << (bits - 1 - b)
    return out


def _find_psi(p: int, n: int) -> int:
    for x in range(2, 10_000):
        psi = pow(x, (p - 1) // (2 * n), p)
        if pow(psi, n, p) == p - 1:
            return psi
    raise ParamError(f"no primitive {2 * n}-th root of unity mod {p}")


def _powers(base: int, n: int, p: int) -> list[int]:
    out = [1] * n
    for i in range(1, n):
        out[i] = out[i - 1] * base % p
    return out


class RnsContext:
    """Precomputed tables for one parameter set (NTT twiddles, CRT constants, digits)."""

    def __init__(self, params: HeParams):
        self.params = params
        n = params.ring_degree
        self.n = n
        self.L = params.max_level
        self.chain = list(params.modulus_chain)
        self.special = list(params.special_primes)
        all_primes = self.chain + self.special
        self.primes_py = all_primes
        self.primes = np.array(all_primes, dtype=U64)
        self.pinv = np.array([1.0 / p for p in all_primes])
        rows = len(all_primes)
        brv = _bitrev(n)
        self.tw = np.empty((rows, n), dtype=U64)
        self.itw = np.empty((rows, n), dtype=U64)
        self.ninv = np.empty(rows, dtype=U64)
        for r, p in enumerate(all_primes):
            psi = _find_psi(p, n)
            fw = np.array(_powers(psi, n, p), dtype=U64)
            bw = np.array(_powers(pow(psi, -1, p), n, p), dtype=U64)
            self.tw[r] = fw[brv]
            self.itw[r] = bw[brv]
            self.ninv[r] = pow(n, -1, p)
        self.twf = self.tw.astype(np.float64) / self.primes.astype(np.float64)[:, None]
        self.itwf = self.itw.astype(np.float64) / self.primes.astype(np.float64)[:, None]
        self.ninvf = self.ninv.astype(np.float64) / self.primes.astype(np.float64)

        # NTT slot i evaluates at psi^(2*brv(i)+1); automorphisms permute those slots.
        self.eval_exp = 2 * brv + 1
        self._exp_index = np.empty(2 * n, dtype=np.int64)
        self._exp_index[self.eval_exp] = np.arange(n)

        self.alpha = len(self.special)
        self.digits = [list(range(s, min(s + self.alpha, self.L + 1))) for s in range(0, self.L + 1, self.alpha)]
        self.P = math.prod(self.special)
        self.special_idx = np.arange(self.L + 1, self.L + 1 + self.alpha, dtype=np.int64)
        self._q_idx = [np.arange(lvl + 1, dtype=np.int64) for lvl in range(self.L + 1)]
        self._ext_idx = [np.concatenate([q, self.special_idx]) for q in self._q_idx]
        self._q_idx2 = [np.concatenate([q, q]) for q in self._q_idx]
        self._special_idx2 = np.concatenate([self.special_idx, self.special_idx])

        # Canonical embedding index maps.
        m = 2 * n
        self.slots = n // 2
        rot = np.array([pow(5, j, m) for j in range(self.slots)], dtype=np.int64)
        self.slot_pos = (rot - 1) // 2
        self.conj_pos = (m - rot - 1) // 2
        k = np.arange(n)
        self.zeta = np.exp(1j * np.pi * k / n)
        self.zeta_inv = np.conj(self.zeta)
        self._modup: dict = {}
        self._moddown: dict = {}
        self._rescale: dict = {}
        self._fused: dict = {}
        self._perms: dict = {}

    # -- index helpers ---------------------------------------------------------
    # Cached index arrays are shared between calls; kernels only read them.
    def q_idx(self, level: int) -> np.ndarray:
        return self._q_idx[level]

    def ext_idx(self, level: int) -> np.ndarray:
        return self._ext_idx[level]

    def galois_perm(self, g: int) -> np.ndarray:
        perm = self._perms.get(g)
        if perm is None:
            perm = self._perms[g] = self._exp_index[(g * self.eval_exp) % (2 * self.n)]
        return perm

    # -- transforms ------------------------------------------------------------
    def ntt(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        K.ntt_forward(x, idx, self.primes, self.tw, self.twf)
        return x

    def intt(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        K.ntt_inverse(x, idx, self.primes, self.itw, self.itwf, self.ninv, self.ninvf)
        return x

    def to_rows(self, coeffs: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Signed int64 coefficient vector -> NTT rows for the listed primes."""
        return self.ntt(K.reduce_signed(np.ascontiguousarray(coeffs, dtype=np.int64), idx, self.primes), idx)

    def scalar_residues(self, c: int, idx: np.ndarray) -> np.ndarray:
        return np.array([c % self.primes_py[i] for i in idx], dtype=U64)

    # -- CRT constants ---------------------------------------------------------
    def _conv_consts(self, src: list[int], dst: list[int]):
        ps = [self.primes_py[i] for i in src]
        Q = math.prod(ps)
        qhat = [Q // q for q in ps]
        qhat_inv = np.array([pow(h % q, -1, q) for h, q in zip(qhat, ps)], dtype=U64)
        qhat_mod = np.array([[h % self.primes_py[d] for d in dst] for h in qhat], dtype=U64)
        return qhat_inv, qhat_mod

    def modup_plan(self, level: int):
        plan = self._modup.get(level)
        if plan is None:
            plan = []
            ext = list(self.ext_idx(level))
            for j, dig in enumerate(self.digits):
                src = [i for i in dig if i <= level]
                if not src:
                    continue
                dst = [i for i in ext if i not in src]
                qhi, qhm = self._conv_consts(src, dst)
                src_pos = np.array([ext.index(i) for i in src], dtype=np.int64)
                dst_pos = np.array([ext.index(i) for i in dst], dtype=np.int64)
                plan.append((j, np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), src_pos, dst_pos, qhi, qhm))
            self._modup[level] = plan
        return plan

    def moddown_plan(self, level: int):
        plan = self._moddown.get(level)
        if plan is None:
            dst = list(range(level + 1))
            qhi, qhm = self._conv_consts(list(self.special_idx), dst)
            pinv_q = np.array([pow(self.P % q, -1, q) for q in self.chain[: level + 1]], dtype=U64)
            plan = (qhi, qhm, pinv_q, np.concatenate([pinv_q, pinv_q]))
            self._moddown[level] = plan
        return plan

    def rescale_consts(self, level: int) -> np.ndarray:
        c = self._rescale.get(level)
        if c is None:
            q = self.chain[level]
            c = np.array([pow(q, -1, p) for p in self.chain[:level]], dtype=U64)
            self._rescale[level] = c
        return c

    # -- ring operations on NTT rows --------------------------------------------
    def rescale_rows(self, x: np.ndarray, level: int) -> np.ndarray:
        """Divide by q_level and drop the last row (exact centered rounding)."""
        last = self.intt(x[level].copy()[None, :], np.array([level], dtype=np.int64))[0]
        lower = self.q_idx(level - 1)
        lifted = self.ntt(K.center_lift(last, U64(self.chain[level]), lower, self.primes), lower)
        return K.sub_scaled_rows(x[:level], lifted, self.rescale_consts(level), lower, self.primes, self.pinv)

    def fused_plan(self, level: int):
        """The mod-up and mod-down plans of ``level`` as padded arrays for :func:`key_switch_fused`."""
        plan = self._fused.get(level)
        if plan is None:
            up = self.modup_plan(level)
            D, a, E = len(up), self.alpha, self.ext_idx(level).size
            dig_j = np.array([u[0] for u in up], dtype=np.int64)
            src_n = np.array([u[1].size for u in up], dtype=np.int64)
            dst_n = np.array([u[2].size for u in up], dtype=np.int64)
            src_idx = np.zeros((D, a), dtype=np.int64)
            src_pos = np.zeros((D, a), dtype=np.int64)
            dst_idx = np.zeros((D, E), dtype=np.int64)
            dst_pos = np.zeros((D, E), dtype=np.int64)
            up_qhi = np.zeros((D, a), dtype=U64)
            up_qhm = np.zeros((D, a, E), dtype=U64)
            for t, (_, src, dst, sp, dp, qhi, qhm) in enumerate(up):
                src_idx[t, :src.size], src_pos[t, :src.size], up_qhi[t, :src.size] = src, sp, qhi
                dst_idx[t, :dst.size], dst_pos[t, :dst.size] = dst, dp
                up_qhm[t, :src.size, :dst.size] = qhm
            md_qhi, md_qhm, md_pinv, _ = self.moddown_plan(level)
            plan = (dig_j, src_n, src_idx, src_pos, dst_n, dst_idx, dst_pos, up_qhi, up_qhm,
                    self.special_idx, md_qhi, md_qhm, md_pinv)
            self._fused[level] = plan
        return plan

    def key_switch(self, d: np.ndarray, level: int, key: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Return (b, a) with b + a*s ≈ d*s', where ``key`` encrypts s' under s."""
        k0, k1 = key
        return K.key_switch_fused(np.ascontiguousarray(d), self.q_idx(level), self.ext_idx(level), self.primes,
                                  self.pinv, self.tw, self.twf, self.itw, self.itwf, self.ninv, self.ninvf,
                                  k0, k1, *self.fused_plan(level))

    def key_switch_steps(self, d: np.ndarray, level: int, key: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Step-by-step form of :meth:`key_switch`, kept as its cross-check."""
        k0, k1 = key
        qi = self.q_idx(level)
        ext = self.ext_idx(level)
        dcoef = self.intt(d.copy(), qi)
        acc0 = np.zeros((ext.size, self.n), dtype=U64)
        acc1 = np.zeros((ext.size, self.n), dtype=U64)
        part = np.empty((ext.size, self.n), dtype=U64)
        for j, src, dst, src_pos, dst_pos, qhi, qhm in self.modup_plan(level):
            conv = K.basis_convert(dcoef[src], src, dst, self.primes, self.pinv, qhi, qhm)
            part[src_pos] = d[src]
            part[dst_pos] = self.ntt(conv, dst)
            K.mul_add_keyrows(acc0, part, k0[j], ext, self.primes, self.pinv)
            K.mul_add_keyrows(acc1, part, k1[j], ext, self.primes, self.pinv)
        return self.mod_down_pair(acc0, acc1, level)

    def mod_down(self, x: np.ndarray, level: int) -> np.ndarray:
        qhi, qhm, pinv_q, _ = self.moddown_plan(level)
        qi = self.q_idx(level)
        sp = self.intt(x[level + 1:].copy(), self.special_idx)
        conv = self.ntt(K.basis_convert(sp, self.special_idx, qi, self.primes, self.pinv, qhi, qhm), qi)
        return K.sub_scaled_rows(x[: level + 1], conv, pinv_q, qi, self.primes, self.pinv)

    def mod_down_pair(self, x0: np.ndarray, x1: np.ndarray, level: int) -> tuple[np.ndarray, np.ndarray]:
        """:meth:`mod_down` of two polynomials, sharing the transform calls."""
        qhi, qhm, _, pinv_q2 = self.moddown_plan(level)
        qi = self.q_idx(level)
        top = level + 1
        sp = self.intt(np.concatenate([x0[top:], x1[top:]]), self._special_idx2)
        a = self.alpha
        conv = np.concatenate([K.basis_convert(sp[:a], self.special_idx, qi, self.primes, self.pinv, qhi, qhm),
                               K.basis_convert(sp[a:], self.special_idx, qi, self.primes, self.pinv, qhi, qhm)])
        self.ntt(conv, self._q_idx2[level])
        out = K.sub_scaled_rows(np.concatenate([x0[:top], x1[:top]]), conv, pinv_q2, self._q_idx2[level],
                                self.primes, self.pinv)
        return out[:top], out[top:]

    # -- canonical embedding -----------------------------------------------------
    def encode_coeffs(self, slots: np.ndarray, scale: float) -> np.ndarray:
        E = np.zeros(self.n, dtype=np.complex128)
        E[self.slot_pos] = slots
        E[self.conj_pos] = np.conj(slots)
        m = (np.fft.fft(E) / self.n * self.zeta_inv).real * scale
        if np.max(np.abs(m), initial=0.0) >= 2.0 ** 62:
            raise OverflowError("encoded coefficients exceed the int64 range; lower the scale or the values")
        return np.rint(m).astype(np.int64)

    def decode_coeffs(self, coeffs: np.ndarray, scale: float) -> np.ndarray:
        E = self.n * np.fft.ifft(coeffs * self.zeta)
        return E[self.slot_pos].real / scale


@lru_cache(maxsize=8)
def rns_context(params: HeParams) -> RnsContext:
    return RnsContext(params)


# -- sampling ----------------------------------------------------------------------

def _sparse_ternary(rng: np.random.Generator, n: int, h: int) -> np.ndarray:
    s = np.zeros(n, dtype=np.int64)
    pos = rng.choice(n, size=h, replace=False)
    s[pos] = rng.choice(np.array([-1, 1]), size=h)
    return s


def _zo(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.choice(np.array([-1, 0, 0, 1], dtype=np.int64), size=n)


def _gauss(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    return np.rint(rng.normal(0.0, sigma, size=n)).astype(np.int64)


def _uniform_rows(rng: np.random.Generator, ctx: RnsContext, idx: np.ndarray) -> np.ndarray:
    out = np.empty((idx.size, ctx.n), dtype=U64)
    for r, i in enumerate(idx):
        out[r] = rng.integers(0, ctx.primes_py[i], size=ctx.n, dtype=U64)
    return out


@dataclass(frozen=True)
class CkksSecret:
    coeffs: np.ndarray
    rows: np.ndarray  # NTT form over every prime of the chain and the special primes


def _switch_key(ctx: RnsContext, rng, s_rows: np.ndarray, s_prime_rows: np.ndarray):
    all_idx = np.arange(ctx.primes.size, dtype=np.int64)
    k0s, k1s = [], []
    for dig in ctx.digits:
        a = _uniform_rows(rng, ctx, all_idx)
        e = ctx.to_rows(_gauss(rng, ctx.n, ctx.params.sigma), all_idx)
        gad = np.zeros(all_idx.size, dtype=U64)
        for i in dig:
            gad[i] = ctx.P % ctx.primes_py[i]
        b = K.sub_rows(e, K.mul_rows(a, s_rows, all_idx, ctx.primes, ctx.pinv), all_idx, ctx.primes)
        b = K.add_rows(b, K.mul_scalar_rows(s_prime_rows, gad, all_idx, ctx.primes, ctx.pinv), all_idx, ctx.primes)
        k0s.append(b)
        k1s.append(a)
    return np.stack(k0s), np.stack(k1s)


def ckks_keygen(params: HeParams, seed: int = 0, rotation_steps=None) -> KeyMaterial:
    """Generate secret, public, relinearization and rotation keys from ``seed``."""
    ctx = rns_context(params)
    rng = np.random.default_rng([seed, 0x6B6579])
    n = ctx.n
    all_idx = np.arange(ctx.primes.size, dtype=np.int64)
    h = min(params.secret_weight, n // 2)
    s = _sparse_ternary(rng, n, h)
    s_rows = ctx.to_rows(s, all_idx)
    secret = CkksSecret(coeffs=s, rows=s_rows)

    qi = ctx.q_idx(ctx.L)
    a = _uniform_rows(rng, ctx, qi)
    e = ctx.to_rows(_gauss(rng, n, params.sigma), qi)
    b = K.sub_rows(e, K.mul_rows(a, s_rows[: ctx.L + 1], qi, ctx.primes, ctx.pinv), qi, ctx.primes)
    pk = (b, a)

    relin = _switch_key(ctx, rng, s_rows, K.mul_rows(s_rows, s_rows, all_idx, ctx.primes, ctx.pinv))
    steps = power_of_two_steps(params.slot_count) if rotation_steps is None else sorted(set(rotation_steps))
    rot = {}
    for step in steps:
        g = pow(5, step % params.slot_count, 2 * n)
        s_g = np.ascontiguousarray(s_rows[:, ctx.galois_perm(g)])
        rot[step] = _switch_key(ctx, rng, s_rows, s_g)
    key_id = hashlib.sha256(b.tobytes() + a.tobytes()).hexdigest()[:16]
    return KeyMaterial(params=params, key_id=key_id, public_key=pk, relin_key=relin, rotation_keys=rot,
                       secret_key=secret)


def _decrypt_slots(ctx: RnsContext, secret: CkksSecret, ct: Ciphertext) -> np.ndarray:
    c0, c1 = ct.body
    rows = min(ct.level, 1) + 1
    idx = ctx.q_idx(rows - 1)
    m = K.add_rows(c0[:rows], K.mul_rows(c1[:rows], secret.rows[:rows], idx, ctx.primes, ctx.pinv), idx, ctx.primes)
    m = ctx.intt(m, idx)
    if rows == 2:
        q0, q1 = ctx.chain[0], ctx.chain[1]
        vals = K.crt2_centered(m[0], m[1], U64(q0), U64(q1), U64(pow(q0, -1, q1)), ctx.pinv[1])
    else:
        vals = K.centered_float(m[0], U64(ctx.chain[0]))
    return ctx.decode_coeffs(vals, ct.scale)


class RefreshOracle:
    """Trusted stand-in for bootstrapping: decrypts and re-encrypts at level L - K.

    It keeps the secret key private and exposes only :meth:`refresh`. The
    re-encryption randomness is derived from the input ciphertext bytes, so a
    given input always refreshes to the same output.
    """

    trusted = True

    def __init__(self, keys: KeyMaterial):
        if not keys.has_secret:
            raise MissingKeyError("a refresh oracle needs the secret key")
        self.__secret = keys.secret_key
        self.__pk = keys.public_key
        self.params = keys.params
        self.key_id = keys.key_id

    def refresh(self, ct: Ciphertext, tag=None) -> Ciphertext:
        ctx = rns_context(self.params)
        slots = _decrypt_slots(ctx, self.__secret, ct)
        level = self.params.refresh_level
        scale = self.params.scale_at(level)
        h = hashlib.sha256()
        h.update(ct.body[0].tobytes())
        h.update(ct.body[1].tobytes())
        rng = np.random.default_rng(np.frombuffer(h.digest(), dtype=np.uint32))
        body = _encrypt_rows(ctx, self.__pk, rng, ctx.to_rows(ctx.encode_coeffs(slots, scale), ctx.q_idx(level)), level)
        return Ciphertext(body=body, level=level, scale=scale, slot_count=ct.slot_count, key_id=ct.key_id,
                          depth=ct.depth, noise=_fresh_noise(self.params, scale), tag=tag)


def _encrypt_rows(ctx: RnsContext, pk, rng, m_rows: np.ndarray, level: int):
    qi = ctx.q_idx(level)
    n = ctx.n
    u = ctx.to_rows(_zo(rng, n), qi)
    e0 = ctx.to_rows(_gauss(rng, n, ctx.params.sigma), qi)
    e1 = ctx.to_rows(_gauss(rng, n, ctx.params.sigma), qi)
    b, a = pk
    c0 = K.add_rows(K.add_rows(K.mul_rows(b[: level + 1], u, qi, ctx.primes, ctx.pinv), e0, qi, ctx.primes),
                    m_rows, qi, ctx.primes)
    c1 = K.add_rows(K.mul_rows(a[: level + 1], u, qi, ctx.primes, ctx.pinv), e1, qi, ctx.primes)
    return (c0, c1)


def _fresh_noise(params: HeParams, scale: float) -> float:
    n = params.ring_degree
    return 6.0 * params.sigma * math.sqrt(n * (min(params.secret_weight, n // 2) + 1)) / scale


class CkksBackend(Backend):
    """RNS-CKKS evaluator.

    ``refresh_oracle`` enables :meth:`refresh` (the trusted decrypt/recrypt
    stand-in); pass ``False`` to disable it entirely.
    """

    name = "ckks"

    def __init__(self, params: HeParams, keys: KeyMaterial | None = None, seed: int = 0,
                 counters: OpCounters | None = None, strict: bool = False,
                 refresh_oracle: RefreshOracle | bool | None = True, rotation_steps=None):
        if keys is None:
            keys = ckks_keygen(params, seed, rotation_steps)
        super().__init__(params, keys, counters, strict)
        self.ctx = rns_context(params)
        self._rng = np.random.default_rng([seed, 0x656E63])
        if refresh_oracle is True:
            refresh_oracle = RefreshOracle(keys) if keys.has_secret else None
        self.oracle = refresh_oracle or None
        self._plain_cache = lru_cache(maxsize=128)(self._plain_rows_uncached)

    def evaluation_view(self) -> "CkksBackend":
        """Same public/evaluation keys and refresh oracle, no secret key."""
        return CkksBackend(self.params, self.keys.public_view(), counters=self.counters, strict=self.strict,
                           refresh_oracle=self.oracle or False)

    # -- helpers -----------------------------------------------------------------
    def _ct(self, body, level, scale, depth, noise, tag) -> Ciphertext:
        return Ciphertext(body=body, level=level, scale=scale, slot_count=self.slot_count, key_id=self.key_id,
                          depth=depth, noise=noise, tag=tag)

    def _plain_rows_uncached(self, data: bytes, level: int, scale: float) -> np.ndarray:
        slots = np.frombuffer(data, dtype=np.float64)
        return self.ctx.to_rows(self.ctx.encode_coeffs(slots, scale), self.ctx.q_idx(level))

    def _plain_rows(self, slots: np.ndarray, level: int, scale: float) -> np.ndarray:
        return self._plain_cache(np.ascontiguousarray(slots, dtype=np.float64).tobytes(), level, scale)

    def _rescale_noise(self, scale: float) -> float:
        n = self.params.ring_degree
        return math.sqrt(n * (min(self.params.secret_weight, n // 2) + 1)) / scale

    def _rescale_pair(self, c0, c1, level):
        return self.ctx.rescale_rows(c0, level), self.ctx.rescale_rows(c1, level)

    # -- hooks ---------------------------------------------------------------------
    def _encode_body(self, slots, level, scale):
        return self._plain_rows(slots, level, scale)

    def _encrypt(self, pt: Plaintext, tag):
        body = _encrypt_rows(self.ctx, self.keys.public_key, self._rng, pt.body, pt.level)
        return self._ct(body, pt.level, pt.scale, 0, _fresh_noise(self.params, pt.scale), tag)

    def _decrypt(self, ct):
        if not self.keys.has_secret:
            raise MissingKeyError("this backend view holds no secret key")
        return _decrypt_slots(self.ctx, self.keys.secret_key, ct)

    def _drop_to(self, ct, level):
        c0, c1 = ct.body
        target = self.params.scale_at(level)
        q = self.ctx.chain[level + 1]
        c = int(round(target * q / ct.scale))
        idx = self.ctx.q_idx(level + 1)
        res = self.ctx.scalar_residues(c, idx)
        c0 = K.mul_scalar_rows(np.ascontiguousarray(c0[: level + 2]), res, idx, self.ctx.primes, self.ctx.pinv)
        c1 = K.mul_scalar_rows(np.ascontiguousarray(c1[: level + 2]), res, idx, self.ctx.primes, self.ctx.pinv)
        body = self._rescale_pair(c0, c1, level + 1)
        return replace(ct, body=body, level=level, scale=ct.scale * c / q,
                       noise=ct.noise + self._rescale_noise(target))

    def _check_scales(self, a, b):
        if abs(a.scale - b.scale) > 1e-6 * a.scale:
            raise ValueError(f"scale mismatch at equal level: {a.scale} vs {b.scale}")

    def _add(self, a, b, tag):
        self._check_scales(a, b)
        idx = self.ctx.q_idx(a.level)
        body = (K.add_rows(a.body[0], b.body[0], idx, self.ctx.primes),
                K.add_rows(a.body[1], b.body[1], idx, self.ctx.primes))
        return self._ct(body, a.level, a.scale, max(a.depth, b.depth), a.noise + b.noise, tag)

    def _sub(self, a, b, tag):
        self._check_scales(a, b)
        idx = self.ctx.q_idx(a.level)
        body = (K.sub_rows(a.body[0], b.body[0], idx, self.ctx.primes),
                K.sub_rows(a.body[1], b.body[1], idx, self.ctx.primes))
        return self._ct(body, a.level, a.scale, max(a.depth, b.depth), a.noise + b.noise, tag)

    def _neg(self, a, tag):
        idx = self.ctx.q_idx(a.level)
        z = np.zeros_like(a.body[0])
        body = (K.sub_rows(z, a.body[0], idx, self.ctx.primes), K.sub_rows(z, a.body[1], idx, self.ctx.primes))
        return self._ct(body, a.level, a.scale, a.depth, a.noise, tag)

    def _add_scalar(self, a, c, tag):
        idx = self.ctx.q_idx(a.level)
        res = self.ctx.scalar_residues(int(round(c * a.scale)), idx)
        body = (K.add_scalar_rows(a.body[0], res, idx, self.ctx.primes), a.body[1])
        return self._ct(body, a.level, a.scale, a.depth, a.noise, tag)

    def _add_plain(self, a, v, tag):
        idx = self.ctx.q_idx(a.level)
        rows = self._plain_rows(v, a.level, a.scale)
        body = (K.add_rows(a.body[0], rows, idx, self.ctx.primes), a.body[1])
        return self._ct(body, a.level, a.scale, a.depth, a.noise, tag)

    def _tensor(self, xs, ys):
        lvl = xs[0].level
        idx = self.ctx.q_idx(lvl)
        pr, pv = self.ctx.primes, self.ctx.pinv
        shape = xs[0].body[0].shape
        d0 = np.zeros(shape, dtype=U64)
        d1 = np.zeros(shape, dtype=U64)
        d2 = np.zeros(shape, dtype=U64)
        for x, y in zip(xs, ys):
            a0, a1 = x.body
            b0, b1 = y.body
            K.mul_add_rows(d0, a0, b0, idx, pr, pv)
            K.mul_add_rows(d1, a0, b1, idx, pr, pv)
            K.mul_add_rows(d1, a1, b0, idx, pr, pv)
            K.mul_add_rows(d2, a1, b1, idx, pr, pv)
        k0, k1 = self.ctx.key_switch(d2, lvl, self.keys.relin_key)
        c0 = K.add_rows(d0, k0, idx, pr)
        c1 = K.add_rows(d1, k1, idx, pr)
        return self._rescale_pair(c0, c1, lvl)

    def _mult(self, a, b, tag):
        body = self._tensor([a], [b])
        scale = a.scale * b.scale / self.ctx.chain[a.level]
        noise = a.noise + b.noise + self._rescale_noise(scale)
        return self._ct(body, a.level - 1, scale, max(a.depth, b.depth) + 1, noise, tag)

    def _dot(self, xs, ys, tag):
        for x, y in zip(xs[1:], ys[1:]):
            if abs(x.scale * y.scale - xs[0].scale * ys[0].scale) > 1e-6 * xs[0].scale * ys[0].scale:
                raise ValueError("dot operands must share a product scale")
        body = self._tensor(xs, ys)
        scale = xs[0].scale * ys[0].scale / self.ctx.chain[xs[0].level]
        noise = sum(x.noise + y.noise for x, y in zip(xs, ys)) + self._rescale_noise(scale)
        return self._ct(body, xs[0].level - 1, scale, max(c.depth for c in list(xs) + list(ys)) + 1, noise, tag)

    def _mult_scalar(self, a, c, tag):
        lvl = a.level
        target = self.params.scale_at(lvl - 1)
        q = self.ctx.chain[lvl]
        ci = int(round(c * target * q / a.scale))
        idx = self.ctx.q_idx(lvl)
        res = self.ctx.scalar_residues(ci, idx)
        c0 = K.mul_scalar_rows(a.body[0], res, idx, self.ctx.primes, self.ctx.pinv)
        c1 = K.mul_scalar_rows(a.body[1], res, idx, self.ctx.primes, self.ctx.pinv)
        body = self._rescale_pair(c0, c1, lvl)
        noise = a.noise * abs(c) + self._rescale_noise(target)
        return self._ct(body, lvl - 1, target, a.depth + 1, noise, tag)

    def _mult_plain(self, a, v, tag):
        lvl = a.level
        target = self.params.scale_at(lvl - 1)
        pscale = target * self.ctx.chain[lvl] / a.scale
        rows = self._plain_rows(v, lvl, pscale)
        idx = self.ctx.q_idx(lvl)
        c0 = K.mul_rows(a.body[0], rows, idx, self.ctx.primes, self.ctx.pinv)
        c1 = K.mul_rows(a.body[1], rows, idx, self.ctx.primes, self.ctx.pinv)
        body = self._rescale_pair(c0, c1, lvl)
        noise = a.noise * float(np.max(np.abs(v), initial=0.0)) + self._rescale_noise(target)
        return self._ct(body, lvl - 1, target, a.depth + 1, noise, tag)

    def _rotate_step(self, a, step, tag):
        key = self.keys.rotation_keys.get(step)
        if key is None:
            raise MissingKeyError(f"no rotation key for step {step}")
        g = pow(5, step % self.slot_count, 2 * self.ctx.n)
        perm = self.ctx.galois_perm(g)
        c0 = np.ascontiguousarray(a.body[0][:, perm])
        c1 = np.ascontiguousarray(a.body[1][:, perm])
        k0, k1 = self.ctx.key_switch(c1, a.level, key)
        idx = self.ctx.q_idx(a.level)
        body = (K.add_rows(c0, k0, idx, self.ctx.primes), k1)
        return self._ct(body, a.level, a.scale, a.depth, a.noise + self._rescale_noise(a.scale), tag)

    def _refresh(self, a, tag):
        if self.oracle is None:
            raise RefreshDisabledError("no refresh oracle is configured for this backend")
        return self.oracle.refresh(a, tag)
