"""Transformer-layer blocks over column-packed ciphertexts.

The layer is: RMSNorm -> Q/K/V projections -> RoPE -> sigmoid attention ->
output projection -> residual -> RMSNorm -> SwiGLU FFN -> residual, with an
optional final RMSNorm. The only refresh sits inside RMSNorm, on the single
ciphertext holding the per-token inverse RMS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import approx as ax
from . import reference as ref
from .he.base import Backend
from .linalg import ElementAccessor, Orientation, ccmm, hadamard_cc, pcmm
from .packing import PackedMatrix, TernaryMatrix, from_columns, hconcat, live_mask, relevel
from .runtime import LevelTracker


@dataclass(frozen=True)
class AttentionConfig:
    """Multi-head sigmoid attention settings.

    ``bias=None`` means -log(s); ``bias_mode="faithful"`` flips that default
    to +log(s). ``head_scale="head"`` uses 1/√d′, ``"model"`` uses 1/√d.
    The sigmoid profile's domain must cover the scaled scores.
    """

    heads: int
    seq_len: int
    model_dim: int
    bias: float | None = None
    bias_mode: str = "default"
    head_scale: str = "head"
    sigmoid: ax.ApproxProfile = ax.ApproxProfile(59, (-16.0, 16.0))

    def __post_init__(self):
        if self.heads < 1 or self.model_dim % self.heads:
            raise ValueError(f"heads={self.heads} must divide model_dim={self.model_dim}")
        if self.bias is not None and not math.isfinite(self.bias):
            raise ValueError("attention bias must be finite")
        if self.bias_mode not in ("default", "faithful"):
            raise ValueError(f"unknown bias_mode {self.bias_mode!r}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def effective_bias(self) -> float:
        if self.bias is not None:
            return float(self.bias)
        b = math.log(self.seq_len)
        return b if self.bias_mode == "faithful" else -b

    @property
    def score_scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim if self.head_scale == "head" else self.model_dim)

    def sigmoid_approx(self) -> ax.ChebyshevApprox:
        return ax.fit_sigmoid(self.effective_bias, tuple(self.sigmoid.domain), self.sigmoid.degree)


@dataclass(frozen=True)
class NormConfig:
    """RMSNorm settings; the inverse domain follows from the variance domain and ε."""

    eps: float = 1e-5
    variance_domain: tuple[float, float] = (0.01, 10.0)
    sqrt_degree: int = 59
    inverse_degree: int = 59

    @property
    def inverse_domain(self) -> tuple[float, float]:
        lo, hi = self.variance_domain
        return (math.sqrt(lo) + self.eps, math.sqrt(hi) + self.eps)

    def sqrt_approx(self) -> ax.ChebyshevApprox:
        return ax.fit_sqrt(tuple(self.variance_domain), self.sqrt_degree)

    def inverse_approx(self) -> ax.ChebyshevApprox:
        return ax.fit_inverse(self.inverse_domain, self.inverse_degree)

    @property
    def levels_before_refresh(self) -> int:
        return 2 + ax.approx_depth(self.sqrt_degree)

    @property
    def levels_after_refresh(self) -> int:
        return ax.approx_depth(self.inverse_degree) + 2


PAPER_NORM = NormConfig(sqrt_degree=59, inverse_degree=119)


@dataclass(frozen=True)
class LayerConfig:
    attention: AttentionConfig
    ffn_dim: int
    norm: NormConfig = NormConfig()
    silu: ax.ApproxProfile = ax.ApproxProfile(59, (-16.0, 16.0))
    rope_mode: str = "paired"
    rope_base: float = 10_000.0
    final_norm: bool = True


@dataclass(frozen=True)
class LayerWeights:
    wq: TernaryMatrix
    wk: TernaryMatrix
    wv: TernaryMatrix
    wo: TernaryMatrix
    w1: TernaryMatrix
    w2: TernaryMatrix
    w3: TernaryMatrix
    gamma_attn: np.ndarray
    gamma_ffn: np.ndarray
    gamma_final: np.ndarray
    rope_base: float = 10_000.0

    def __post_init__(self):
        for g in (self.gamma_attn, self.gamma_ffn, self.gamma_final):
            if not np.all(np.isfinite(g)):
                raise ValueError("gamma vectors must be finite")

    @property
    def model_dim(self) -> int:
        return self.wq.shape[0]

    @property
    def ffn_dim(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, f: int, density: float = 0.5,
               gamma_attn: float = 0.25, gamma_ffn: float = 0.15, gamma_final: float = 1.0,
               rope_base: float = 10_000.0) -> "LayerWeights":
        def tm(a, b):
            return TernaryMatrix.random(rng, a, b, density)

        def gam(c):
            # float32-representable so weight files round-trip exactly
            return (c * rng.uniform(0.75, 1.25, d)).astype(np.float32).astype(np.float64)

        return cls(tm(d, d), tm(d, d), tm(d, d), tm(d, d), tm(d, f), tm(d, f), tm(f, d),
                   gam(gamma_attn), gam(gamma_ffn), gam(gamma_final), rope_base)

    @classmethod
    def zeros(cls, d: int, f: int) -> "LayerWeights":
        z = TernaryMatrix.zeros
        return cls(z(d, d), z(d, d), z(d, d), z(d, d), z(d, f), z(d, f), z(f, d), np.zeros(d), np.zeros(d), np.zeros(d))

    def tensors(self) -> dict[str, np.ndarray]:
        return {"wq": self.wq.entries, "wk": self.wk.entries, "wv": self.wv.entries, "wo": self.wo.entries,
                "w1": self.w1.entries, "w2": self.w2.entries, "w3": self.w3.entries,
                "gamma_attn": self.gamma_attn, "gamma_ffn": self.gamma_ffn, "gamma_final": self.gamma_final,
                "rope_base": np.array([self.rope_base])}

    @classmethod
    def from_tensors(cls, t: dict) -> "LayerWeights":
        tm = lambda k: TernaryMatrix(np.asarray(t[k]))  # noqa: E731
        base = float(np.asarray(t.get("rope_base", [10_000.0])).ravel()[0])
        return cls(tm("wq"), tm("wk"), tm("wv"), tm("wo"), tm("w1"), tm("w2"), tm("w3"),
                   np.asarray(t["gamma_attn"], dtype=np.float64), np.asarray(t["gamma_ffn"], dtype=np.float64),
                   np.asarray(t["gamma_final"], dtype=np.float64), base)


def _stage(tracker: LevelTracker | None, label: str, source, fn):
    if tracker is None:
        return fn()
    with tracker.stage(label, source) as st:
        st.result = fn()
    return st.result


# -- RoPE ------------------------------------------------------------------------------------


def rope(be: Backend, pm: PackedMatrix, cos: np.ndarray, sin: np.ndarray, mode: str = "paired",
         tag: str | None = "rope") -> PackedMatrix:
    """Rotary embedding on one head's columns; cos/sin have shape (s, d′/2).

    ``paired``: columns (2k, 2k+1) are combined with per-slot (per-position)
    tables. Four pmults per pair, one level, no rotations.
    ``faithful``: the intra-ciphertext sign-exchange form (two rotations and
    two levels per column); see :func:`rope_faithful`.
    """
    s, d = pm.shape
    if d % 2:
        raise ValueError(f"RoPE needs an even number of columns, got {d}")
    if mode == "faithful":
        cols_cos = np.stack([cos[:, j // 2] for j in range(d)], axis=1)
        cols_sin = np.stack([sin[:, j // 2] for j in range(d)], axis=1)
        return rope_faithful(be, pm, cols_cos, cols_sin, tag=tag)
    if mode != "paired":
        raise ValueError(f"unknown RoPE mode {mode!r}")
    pm = relevel(be, pm)
    out = []
    for k in range(d // 2):
        a, b = pm.cols[2 * k], pm.cols[2 * k + 1]
        c, sn = cos[:, k], sin[:, k]
        ac, bs = be.pmult(a, c, tag=tag), be.pmult(b, sn, tag=tag)
        bc, as_ = be.pmult(b, c, tag=tag), be.pmult(a, sn, tag=tag)
        out += [be.sub(ac, bs, tag=tag), be.add(bc, as_, tag=tag)]
    return from_columns(out, s)


def rope_faithful(be: Backend, pm: PackedMatrix, cos_cols: np.ndarray, sin_cols: np.ndarray,
                  tag: str | None = "rope") -> PackedMatrix:
    """Sign-exchange RoPE: t = Rot(q;1)⊠neg ⊞ Rot(q;-1)⊠pos, y = q⊠cos ⊞ t⊠sin.

    ``cos_cols[:, i]`` and ``sin_cols[:, i]`` are the slot tables used for
    column i. This realizes the rotation when one vector's coordinates run
    along the slots; with column packing the slots are token positions and
    the result differs from the standard rotation.
    """
    n = be.slot_count
    s = pm.rows
    neg = np.zeros(n)
    neg[0:s:2] = -1.0
    pos = np.zeros(n)
    pos[1:s:2] = 1.0
    out = []
    for i, q in enumerate(pm.cols):
        r = be.pmult(be.rotate(q, 1, tag=tag), neg, tag=tag)
        lft = be.pmult(be.rotate(q, -1, tag=tag), pos, tag=tag)
        t = be.add(r, lft, tag=tag)
        y = be.add(be.pmult(q, cos_cols[:, i], tag=tag), be.pmult(t, sin_cols[:, i], tag=tag), tag=tag)
        out.append(y)
    return from_columns(out, s)


def rope_heads(be: Backend, pm: PackedMatrix, heads: int, base: float = 10_000.0, mode: str = "paired",
               tag: str | None = "rope") -> PackedMatrix:
    dh = pm.cols_n // heads
    cos, sin = ref.rope_tables(pm.rows, dh, base)
    return hconcat([rope(be, pm.slice_cols(h * dh, (h + 1) * dh), cos, sin, mode, tag) for h in range(heads)])


# -- attention ----------------------------------------------------------------------------------


def sigmoid_attention(be: Backend, Q: PackedMatrix, K: PackedMatrix, V: PackedMatrix, cfg: AttentionConfig,
                      tracker: LevelTracker | None = None) -> PackedMatrix:
    """Per head: σ(Q_h K_hᵀ·scale + b) V_h, concatenated over heads.

    Scores are computed with a transposed accessor over K_h and the score
    scale folded into the extraction masks. The sigmoid acts slot by slot,
    so no row normalization (and no cross-slot data movement) is needed.
    """
    s = Q.rows
    dh = cfg.head_dim
    fit = cfg.sigmoid_approx()
    outs = []
    for h in range(cfg.heads):
        sl = (h * dh, (h + 1) * dh)
        q, k, v = Q.slice_cols(*sl), K.slice_cols(*sl), V.slice_cols(*sl)
        S = _stage(tracker, "attention.scores", q,
                   lambda: ccmm(be, q, ElementAccessor(k, Orientation.TRANSPOSED), cfg.score_scale, tag="attention.scores"))
        A = _stage(tracker, "attention.sigmoid", S,
                   lambda: from_columns([ax.ps_eval(be, c, fit, live=s, tag="attention.sigmoid") for c in S.cols], s))
        O = _stage(tracker, "attention.values", A,
                   lambda: ccmm(be, A, ElementAccessor(v, Orientation.DIRECT), tag="attention.values"))
        outs.append(O)
    return hconcat(outs)


# -- RMSNorm ------------------------------------------------------------------------------------


def rmsnorm(be: Backend, pm: PackedMatrix, gamma, cfg: NormConfig = NormConfig(),
            tracker: LevelTracker | None = None, label: str = "rmsnorm") -> PackedMatrix:
    """y_i = x_i ⊠ s ⊠ γ_i with s = 1 / (√(Σ x_i² / d) + ε).

    The column squares are summed with a single relinearization, scaled by
    1/d, square-rooted, shifted by ε, refreshed once, and inverted. The x
    path is never refreshed.
    """
    s, d = pm.shape
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.size != d:
        raise ValueError(f"gamma has {gamma.size} entries, expected {d}")
    mask = live_mask(s, be.slot_count)
    tag = label
    x = relevel(be, pm)
    t0 = tracker.counters.snapshot() if tracker is not None and tracker.counters is not None else None

    def pre():
        sq = be.dot(list(x.cols), list(x.cols), tag=tag)
        var = be.pmult(sq, mask / d, tag=tag)
        root = ax.ps_eval(be, var, cfg.sqrt_approx(), live=s, tag=tag)
        return be.padd(root, cfg.eps * mask, tag=tag)

    root = _stage(tracker, f"{label}.pre_refresh", x, pre)
    with be.allow_refresh():
        fresh = be.refresh(root, tag=tag)

    def post():
        inv = ax.ps_eval(be, fresh, cfg.inverse_approx(), live=s, tag=tag)
        return from_columns([be.pmult(be.mult(xi, inv, tag=tag), float(g), tag=tag) for xi, g in zip(x.cols, gamma)], s)

    y = _stage(tracker, f"{label}.post_refresh", fresh, post)
    if tracker is not None:
        delta = tracker.counters.snapshot() - t0 if t0 is not None else None
        tracker.record(label, x, y, delta)
    return y


# -- FFN and layer --------------------------------------------------------------------------------


def swiglu_ffn(be: Backend, pm: PackedMatrix, w1: TernaryMatrix, w2: TernaryMatrix, w3: TernaryMatrix,
               profile: ax.ApproxProfile = ax.ApproxProfile(59, (-16.0, 16.0)),
               tracker: LevelTracker | None = None) -> PackedMatrix:
    s = pm.rows
    gate = _stage(tracker, "ffn.gate", pm, lambda: pcmm(be, pm, w1, tag="ffn.gate"))
    up = _stage(tracker, "ffn.up", pm, lambda: pcmm(be, pm, w2, tag="ffn.up"))
    act = _stage(tracker, "ffn.silu", up, lambda: from_columns(
        [ax.silu_ct(be, c, tuple(profile.domain), profile.degree, live=s, tag="ffn.silu") for c in up.cols], s))
    h = _stage(tracker, "ffn.hadamard", act, lambda: hadamard_cc(be, gate, act, tag="ffn.hadamard"))
    return _stage(tracker, "ffn.down", h, lambda: pcmm(be, h, w3, tag="ffn.down"))


def residual(be: Backend, a: PackedMatrix, b: PackedMatrix, tag: str = "residual") -> PackedMatrix:
    lvl = min(a.level, b.level)
    return from_columns([be.add(be.drop_to(x, lvl), be.drop_to(y, lvl), tag=tag) for x, y in zip(a.cols, b.cols)],
                        a.rows)


def transformer_layer(be: Backend, pm: PackedMatrix, w: LayerWeights, cfg: LayerConfig,
                      tracker: LevelTracker | None = None) -> PackedMatrix:
    att = cfg.attention
    h = rmsnorm(be, pm, w.gamma_attn, cfg.norm, tracker, "rmsnorm.attn")
    q = _stage(tracker, "pcmm.q", h, lambda: pcmm(be, h, w.wq, tag="pcmm.q"))
    k = _stage(tracker, "pcmm.k", h, lambda: pcmm(be, h, w.wk, tag="pcmm.k"))
    v = _stage(tracker, "pcmm.v", h, lambda: pcmm(be, h, w.wv, tag="pcmm.v"))
    q = _stage(tracker, "rope.q", q, lambda: rope_heads(be, q, att.heads, w.rope_base, cfg.rope_mode, "rope.q"))
    k = _stage(tracker, "rope.k", k, lambda: rope_heads(be, k, att.heads, w.rope_base, cfg.rope_mode, "rope.k"))
    a = _stage(tracker, "attention", q, lambda: sigmoid_attention(be, q, k, v, att, tracker))
    o = _stage(tracker, "pcmm.o", a, lambda: pcmm(be, a, w.wo, tag="pcmm.o"))
    x1 = residual(be, pm, o)
    h2 = rmsnorm(be, x1, w.gamma_ffn, cfg.norm, tracker, "rmsnorm.ffn")
    f = _stage(tracker, "ffn", h2, lambda: swiglu_ffn(be, h2, w.w1, w.w2, w.w3, cfg.silu, tracker))
    x2 = residual(be, x1, f)
    if cfg.final_norm:
        x2 = rmsnorm(be, x2, w.gamma_final, cfg.norm, tracker, "rmsnorm.final")
    return x2


def layer_reference(X, w: LayerWeights, cfg: LayerConfig, approximate: bool = False,
                    trace: dict | None = None) -> np.ndarray:
    """Plaintext layer. ``approximate`` swaps in the fitted polynomials; ``trace`` collects intermediates."""
    att, nc = cfg.attention, cfg.norm
    sq = nc.sqrt_approx() if approximate else None
    iv = nc.inverse_approx() if approximate else None
    sig = att.sigmoid_approx() if approximate else None
    sil = ax.fit_sigmoid(0.0, tuple(cfg.silu.domain), cfg.silu.degree) if approximate else None
    tr = trace if trace is not None else {}

    def norm(x, g, key):
        tr[key + ".variance"] = np.mean(x * x, axis=1)
        return ref.rmsnorm(x, g, nc.eps, sq, iv)

    X = np.asarray(X, dtype=np.float64)
    h = norm(X, w.gamma_attn, "norm_attn")
    q = ref.rope_heads(ref.pcmm(h, w.wq.entries), att.heads, w.rope_base)
    k = ref.rope_heads(ref.pcmm(h, w.wk.entries), att.heads, w.rope_base)
    v = ref.pcmm(h, w.wv.entries)
    dh = att.head_dim
    tr["scores"] = np.stack([q[:, i * dh:(i + 1) * dh] @ k[:, i * dh:(i + 1) * dh].T * att.score_scale
                             for i in range(att.heads)])
    a = ref.sigmoid_attention(q, k, v, att.heads, att.effective_bias, att.score_scale, sig)
    x1 = X + ref.pcmm(a, w.wo.entries)
    h2 = norm(x1, w.gamma_ffn, "norm_ffn")
    tr["silu_input"] = ref.pcmm(h2, w.w2.entries)
    x2 = x1 + ref.swiglu_ffn(h2, w.w1.entries, w.w2.entries, w.w3.entries, sil)
    if cfg.final_norm:
        x2 = norm(x2, w.gamma_final, "norm_final")
    return x2


def layer_depth(cfg: LayerConfig) -> dict[str, int]:
    """Levels the x path needs, and the minimum L - K for a full layer."""
    n = cfg.norm
    inv = ax.approx_depth(n.inverse_degree)
    sqrt_pre = n.levels_before_refresh
    rope_lv = 1 if cfg.rope_mode == "paired" else 2
    # Scores take two levels; the value product takes one more because the
    # V extraction runs on the shallower V operand.
    attn = 2 + ax.approx_depth(cfg.attention.sigmoid.degree) + 1
    ffn = ax.approx_depth(cfg.silu.degree) + 1 + 1
    # After the first norm the x path sits at R - inv - 2 (R = L - K).
    after_first = inv + 2
    used = after_first + rope_lv + attn + 2 + ffn
    need = used + sqrt_pre
    if cfg.final_norm:
        return {"x_path": used + 2, "min_refresh_level": need}
    return {"x_path": used, "min_refresh_level": max(need - sqrt_pre, inv + 2 + rope_lv + attn + sqrt_pre)}


def desk_layer_config(seq_len: int = 8, model_dim: int = 16, heads: int = 2, ffn_dim: int = 32,
                      rope_mode: str = "paired", final_norm: bool = True) -> LayerConfig:
    """Light approximation profile sized for a desk-scale layer.

    Degree-31 fits on narrow domains keep each segment inside the L - K = 38 levels
    while holding the polynomial error near 1e-4 for inputs drawn like
    :meth:`LayerWeights.random` with standard-normal activations.
    """
    return LayerConfig(
        attention=AttentionConfig(heads, seq_len, model_dim, sigmoid=ax.ApproxProfile(31, (-8.0, 8.0))),
        ffn_dim=ffn_dim,
        norm=NormConfig(eps=1e-5, variance_domain=(0.25, 16.0), sqrt_degree=31, inverse_degree=31),
        silu=ax.ApproxProfile(31, (-8.0, 8.0)),
        rope_mode=rope_mode,
        final_norm=final_norm,
    )
