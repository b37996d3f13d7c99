"""Compiled RNS kernels.

Every routine works on rows of uint64 residues, one row per prime. Modular
products use the floating-point quotient estimate, which is exact for primes
below 2^50: the product ``a*b`` is formed with uint64 wraparound, the
quotient is estimated in float64, and the remainder is corrected by at most
one modulus in each direction.

Row tables (twiddles, primes) are addressed through an index vector so the
callers never have to copy per-level sub-tables.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def _mulmod(a, b, p, pinv):
    q = np.uint64(np.float64(a) * np.float64(b) * pinv)
    r = np.int64(a * b - q * p)
    pi = np.int64(p)
    while r < 0:
        r += pi
    while r >= pi:
        r -= pi
    return np.uint64(r)


@nb.njit(cache=True)
def ntt_forward(x, idx, primes, tw, twf):
    """In-place negacyclic NTT (Cooley-Tukey, bit-reversed output)."""
    rows, n = x.shape
    for r in range(rows):
        k = idx[r]
        p = primes[k]
        pi = np.int64(p)
        a = x[r]
        t = n
        m = 1
        while m < n:
            t >>= 1
            for i in range(m):
                w = tw[k, m + i]
                wf = twf[k, m + i]
                j1 = 2 * i * t
                for j in range(j1, j1 + t):
                    u = a[j]
                    b = a[j + t]
                    q = np.uint64(np.float64(b) * wf)
                    v = np.int64(b * w - q * p)
                    if v < 0:
                        v += pi
                    elif v >= pi:
                        v -= pi
                    vv = np.uint64(v)
                    s = u + vv
                    if s >= p:
                        s -= p
                    d = u + p - vv
                    if d >= p:
                        d -= p
                    a[j] = s
                    a[j + t] = d
            m <<= 1


@nb.njit(cache=True)
def ntt_inverse(x, idx, primes, itw, itwf, ninv, ninvf):
    """In-place inverse of :func:`ntt_forward` (Gentleman-Sande), including 1/n."""
    rows, n = x.shape
    for r in range(rows):
        k = idx[r]
        p = primes[k]
        pi = np.int64(p)
        a = x[r]
        t = 1
        m = n >> 1
        while m >= 1:
            j1 = 0
            for i in range(m):
                w = itw[k, m + i]
                wf = itwf[k, m + i]
                for j in range(j1, j1 + t):
                    u = a[j]
                    b = a[j + t]
                    s = u + b
                    if s >= p:
                        s -= p
                    d = u + p - b
                    if d >= p:
                        d -= p
                    q = np.uint64(np.float64(d) * wf)
                    v = np.int64(d * w - q * p)
                    if v < 0:
                        v += pi
                    elif v >= pi:
                        v -= pi
                    a[j] = s
                    a[j + t] = np.uint64(v)
                j1 += 2 * t
            t <<= 1
            m >>= 1
        w = ninv[k]
        wf = ninvf[k]
        for j in range(n):
            b = a[j]
            q = np.uint64(np.float64(b) * wf)
            v = np.int64(b * w - q * p)
            if v < 0:
                v += pi
            elif v >= pi:
                v -= pi
            a[j] = np.uint64(v)


@nb.njit(cache=True)
def mul_rows(a, b, idx, primes, pinv):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        k = idx[r]
        p = primes[k]
        pv = pinv[k]
        for j in range(n):
            out[r, j] = _mulmod(a[r, j], b[r, j], p, pv)
    return out


@nb.njit(cache=True)
def mul_add_rows(acc, a, b, idx, primes, pinv):
    """acc += a * b, elementwise and in place."""
    rows, n = a.shape
    for r in range(rows):
        k = idx[r]
        p = primes[k]
        pv = pinv[k]
        for j in range(n):
            s = acc[r, j] + _mulmod(a[r, j], b[r, j], p, pv)
            if s >= p:
                s -= p
            acc[r, j] = s


@nb.njit(cache=True)
def mul_scalar_rows(a, c, idx, primes, pinv):
    """Multiply row r by the residue c[r]."""
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        k = idx[r]
        p = primes[k]
        pv = pinv[k]
        cr = c[r]
        for j in range(n):
            out[r, j] = _mulmod(a[r, j], cr, p, pv)
    return out


@nb.njit(cache=True)
def add_rows(a, b, idx, primes):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = primes[idx[r]]
        for j in range(n):
            s = a[r, j] + b[r, j]
            if s >= p:
                s -= p
            out[r, j] = s
    return out


@nb.njit(cache=True)
def sub_rows(a, b, idx, primes):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = primes[idx[r]]
        for j in range(n):
            s = a[r, j] + p - b[r, j]
            if s >= p:
                s -= p
            out[r, j] = s
    return out


@nb.njit(cache=True)
def add_scalar_rows(a, c, idx, primes):
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        p = primes[idx[r]]
        cr = c[r]
        for j in range(n):
            s = a[r, j] + cr
            if s >= p:
                s -= p
            out[r, j] = s
    return out


@nb.njit(cache=True)
def sub_scaled_rows(a, b, c, idx, primes, pinv):
    """(a - b) * c[r] per row; the rescale and mod-down tail."""
    rows, n = a.shape
    out = np.empty_like(a)
    for r in range(rows):
        k = idx[r]
        p = primes[k]
        pv = pinv[k]
        cr = c[r]
        for j in range(n):
            s = a[r, j] + p - b[r, j]
            if s >= p:
                s -= p
            out[r, j] = _mulmod(s, cr, p, pv)
    return out


@nb.njit(cache=True)
def center_lift(row, q_src, dst_idx, primes):
    """Reduce the centered representative of ``row`` (mod q_src) into each target prime."""
    n = row.shape[0]
    m = dst_idx.shape[0]
    out = np.empty((m, n), dtype=np.uint64)
    half = q_src >> np.uint64(1)
    for j in range(n):
        v = row[j]
        neg = v > half
        for r in range(m):
            p = primes[dst_idx[r]]
            if neg:
                d = (q_src - v) % p
                out[r, j] = (p - d) % p
            else:
                out[r, j] = v % p
    return out


@nb.njit(cache=True)
def basis_convert(x, src_idx, dst_idx, primes, pinv, qhat_inv, qhat_mod):
    """Approximate fast basis conversion from the src primes to the dst primes.

    ``qhat_inv[i]`` is (Q/q_i)^{-1} mod q_i and ``qhat_mod[i, r]`` is
    (Q/q_i) mod p_r. The result equals x + u*Q for some 0 <= u < len(src).
    The constant factor of each inner loop gets its quotient w/p precomputed.
    """
    k, n = x.shape
    m = dst_idx.shape[0]
    out = np.zeros((m, n), dtype=np.uint64)
    y = np.empty(n, dtype=np.uint64)
    for i in range(k):
        s = src_idx[i]
        ps = primes[s]
        pvs = pinv[s]
        hi = qhat_inv[i]
        for j in range(n):
            y[j] = _mulmod(x[i, j], hi, ps, pvs)
        for r in range(m):
            p = primes[dst_idx[r]]
            pi = np.int64(p)
            h = qhat_mod[i, r]
            hf = np.float64(h) / np.float64(p)
            o = out[r]
            for j in range(n):
                yj = y[j]
                q = np.uint64(np.float64(yj) * hf)
                v = np.int64(yj * h - q * p)
                if v < 0:
                    v += pi
                elif v >= pi:
                    v -= pi
                if v >= pi:
                    v -= pi
                if v < 0:
                    v += pi
                t = o[j] + np.uint64(v)
                if t >= p:
                    t -= p
                o[j] = t
    return out


@nb.njit(cache=True)
def crt2_centered(r0, r1, q0, q1, q0inv, pinv1):
    """Centered value of (r0 mod q0, r1 mod q1) as float64."""
    n = r0.shape[0]
    out = np.empty(n, dtype=np.float64)
    h0 = q0 >> np.uint64(1)
    h1 = q1 >> np.uint64(1)
    i0 = np.int64(q0)
    i1 = np.int64(q1)
    for j in range(n):
        a = np.int64(r0[j])
        if r0[j] > h0:
            a -= i0
        d = (np.int64(r1[j]) - a) % i1
        if d < 0:
            d += i1
        t = _mulmod(np.uint64(d), q0inv, q1, pinv1)
        tc = np.int64(t)
        if t > h1:
            tc -= i1
        out[j] = np.float64(a) + np.float64(q0) * np.float64(tc)
    return out


@nb.njit(cache=True)
def centered_float(r0, q0):
    n = r0.shape[0]
    out = np.empty(n, dtype=np.float64)
    h0 = q0 >> np.uint64(1)
    for j in range(n):
        if r0[j] > h0:
            out[j] = -np.float64(q0 - r0[j])
        else:
            out[j] = np.float64(r0[j])
    return out


@nb.njit(cache=True)
def reduce_signed(v, idx, primes):
    """Reduce an int64 vector into every listed prime."""
    n = v.shape[0]
    m = idx.shape[0]
    out = np.empty((m, n), dtype=np.uint64)
    for r in range(m):
        p = np.int64(primes[idx[r]])
        for j in range(n):
            x = v[j] % p
            if x < 0:
                x += p
            out[r, j] = np.uint64(x)
    return out


@nb.njit(cache=True)
def mul_add_keyrows(acc, a, key, idx, primes, pinv):
    """acc[r] += a[r] * key[idx[r]]; key rows are addressed by prime index."""
    rows, n = a.shape
    for r in range(rows):
        k = idx[r]
        p = primes[k]
        pv = pinv[k]
        kr = key[k]
        for j in range(n):
            s = acc[r, j] + _mulmod(a[r, j], kr[j], p, pv)
            if s >= p:
                s -= p
            acc[r, j] = s


@nb.njit(cache=True)
def _mod_down_rows(x, top, qi, special_idx, primes, pinv, itw, itwf, ninv, ninvf, tw, twf, qhi, qhm, pinv_q):
    sp = x[top:].copy()
    ntt_inverse(sp, special_idx, primes, itw, itwf, ninv, ninvf)
    conv = basis_convert(sp, special_idx, qi, primes, pinv, qhi, qhm)
    ntt_forward(conv, qi, primes, tw, twf)
    return sub_scaled_rows(x[:top], conv, pinv_q, qi, primes, pinv)


@nb.njit(cache=True)
def key_switch_fused(d, qi, ext, primes, pinv, tw, twf, itw, itwf, ninv, ninvf, k0, k1,
                     dig_j, src_n, src_idx, src_pos, dst_n, dst_idx, dst_pos, up_qhi, up_qhm,
                     special_idx, md_qhi, md_qhm, md_pinv):
    """Hybrid key switch in one call: mod-up per digit, key inner product, mod-down.

    The digit plan arrives padded: row t uses the first src_n[t] / dst_n[t]
    entries of its index, position and constant arrays.
    """
    top, n = d.shape
    rows = ext.shape[0]
    dcoef = d.copy()
    ntt_inverse(dcoef, qi, primes, itw, itwf, ninv, ninvf)
    acc0 = np.zeros((rows, n), dtype=np.uint64)
    acc1 = np.zeros((rows, n), dtype=np.uint64)
    part = np.empty((rows, n), dtype=np.uint64)
    for t in range(dig_j.shape[0]):
        ns = src_n[t]
        nd = dst_n[t]
        s_idx = src_idx[t, :ns].copy()
        d_idx = dst_idx[t, :nd].copy()
        src_rows = np.empty((ns, n), dtype=np.uint64)
        for i in range(ns):
            src_rows[i] = dcoef[s_idx[i]]
            part[src_pos[t, i]] = d[s_idx[i]]
        conv = basis_convert(src_rows, s_idx, d_idx, primes, pinv, up_qhi[t, :ns].copy(), up_qhm[t, :ns, :nd].copy())
        ntt_forward(conv, d_idx, primes, tw, twf)
        for i in range(nd):
            part[dst_pos[t, i]] = conv[i]
        mul_add_keyrows(acc0, part, k0[dig_j[t]], ext, primes, pinv)
        mul_add_keyrows(acc1, part, k1[dig_j[t]], ext, primes, pinv)
    out0 = _mod_down_rows(acc0, top, qi, special_idx, primes, pinv, itw, itwf, ninv, ninvf, tw, twf,
                          md_qhi, md_qhm, md_pinv)
    out1 = _mod_down_rows(acc1, top, qi, special_idx, primes, pinv, itw, itwf, ninv, ninvf, tw, twf,
                          md_qhi, md_qhm, md_pinv)
    return out0, out1
