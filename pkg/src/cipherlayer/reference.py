"""Plaintext reference implementations of every kernel and block.

Functions that involve a nonlinearity take ``approx``: when it is given, the
fitted Chebyshev polynomial replaces the exact function, which makes the
reference arithmetically identical to what the encrypted pipeline computes.
With ``approx=None`` the exact function is used.
"""

from __future__ import annotations

import math

import numpy as np

from .approx import ChebyshevApprox, sigmoid


def _apply(f_exact, approx: ChebyshevApprox | None, x):
    return f_exact(x) if approx is None else approx(x)


def pcmm(X, W) -> np.ndarray:
    return np.asarray(X, dtype=np.float64) @ np.asarray(W, dtype=np.float64)


def rope_tables(seq_len: int, head_dim: int, base: float = 10_000.0) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (seq_len, head_dim // 2): entry [ν, k] is f(ν·θ_k), θ_k = base^(-2k/d′)."""
    if head_dim % 2:
        raise ValueError("RoPE needs an even head dimension")
    k = np.arange(head_dim // 2)
    theta = base ** (-2.0 * k / head_dim)
    ang = np.arange(seq_len)[:, None] * theta[None, :]
    return np.cos(ang), np.sin(ang)


def rope(X, cos, sin) -> np.ndarray:
    """Rotate each (2k, 2k+1) column pair by the per-row angle."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.empty_like(X)
    Y[:, 0::2] = X[:, 0::2] * cos - X[:, 1::2] * sin
    Y[:, 1::2] = X[:, 1::2] * cos + X[:, 0::2] * sin
    return Y


def rope_heads(X, heads: int, base: float = 10_000.0) -> np.ndarray:
    s, d = X.shape
    dh = d // heads
    cos, sin = rope_tables(s, dh, base)
    return np.hstack([rope(X[:, h * dh:(h + 1) * dh], cos, sin) for h in range(heads)])


def sigmoid_attention(Q, K, V, heads: int, bias: float, head_scale: float | None = None,
                      approx: ChebyshevApprox | None = None) -> np.ndarray:
    """Per head: σ(Q_h K_hᵀ · scale + b) V_h; ``approx`` must already include the bias."""
    s, d = Q.shape
    dh = d // heads
    scale = 1.0 / math.sqrt(dh) if head_scale is None else head_scale
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        S = Q[:, sl] @ K[:, sl].T * scale
        A = sigmoid(S + bias) if approx is None else approx(S)
        outs.append(A @ V[:, sl])
    return np.hstack(outs)


def rmsnorm(X, gamma, eps: float = 1e-5, sqrt_approx: ChebyshevApprox | None = None,
            inv_approx: ChebyshevApprox | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    var = np.mean(X * X, axis=1)
    root = _apply(np.sqrt, sqrt_approx, var) + eps
    inv = _apply(lambda v: 1.0 / v, inv_approx, root)
    return X * inv[:, None] * np.asarray(gamma, dtype=np.float64)[None, :]


def silu(X, approx: ChebyshevApprox | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X * _apply(sigmoid, approx, X)


def swiglu_ffn(X, W1, W2, W3, silu_approx: ChebyshevApprox | None = None) -> np.ndarray:
    gate = pcmm(X, W1)
    up = pcmm(X, W2)
    return pcmm(gate * silu(up, silu_approx), W3)
