"""Named kernels over one encrypted input, with matching plaintext references.

``run_kernel`` is what ``infer``, ``bench`` and the inference server call;
``reference_kernel`` computes the exact plaintext answer for the same input.
"""

from __future__ import annotations

import numpy as np

from . import reference as ref
from .blocks import LayerConfig, LayerWeights, layer_reference, rmsnorm, rope_heads, sigmoid_attention, swiglu_ffn, \
    transformer_layer
from .he.base import Backend
from .linalg import ElementAccessor, Orientation, ccmm, pcmm
from .packing import PackedMatrix
from .runtime import LevelTracker

KERNELS = ("pcmm", "ccmm", "rope", "attention", "rmsnorm", "ffn", "layer")


def run_kernel(be: Backend, kernel: str, pm: PackedMatrix, w: LayerWeights, cfg: LayerConfig,
               tracker: LevelTracker | None = None) -> PackedMatrix:
    """Evaluate ``kernel`` on the packed input ``pm`` (s × d).

    pcmm multiplies by W_q, ccmm forms X·Xᵀ, attention uses X for Q, K and V,
    rmsnorm applies γ_attn, ffn is the SwiGLU block and layer is the full
    transformer layer.
    """
    tracker = tracker if tracker is not None else LevelTracker(be.counters)
    if kernel == "pcmm":
        with tracker.stage("pcmm", pm) as st:
            st.result = pcmm(be, pm, w.wq)
    elif kernel == "ccmm":
        with tracker.stage("ccmm", pm) as st:
            st.result = ccmm(be, pm, ElementAccessor(pm, Orientation.TRANSPOSED))
    elif kernel == "rope":
        with tracker.stage("rope", pm) as st:
            st.result = rope_heads(be, pm, cfg.attention.heads, w.rope_base, cfg.rope_mode)
    elif kernel == "attention":
        with tracker.stage("attention", pm) as st:
            st.result = sigmoid_attention(be, pm, pm, pm, cfg.attention, tracker)
    elif kernel == "rmsnorm":
        return rmsnorm(be, pm, w.gamma_attn, cfg.norm, tracker, "rmsnorm")
    elif kernel == "ffn":
        with tracker.stage("ffn", pm) as st:
            st.result = swiglu_ffn(be, pm, w.w1, w.w2, w.w3, cfg.silu, tracker)
    elif kernel == "layer":
        with tracker.stage("layer", pm) as st:
            st.result = transformer_layer(be, pm, w, cfg, tracker)
    else:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")
    return st.result


def reference_kernel(kernel: str, X, w: LayerWeights, cfg: LayerConfig, approximate: bool = False) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    att, nc = cfg.attention, cfg.norm
    if kernel == "pcmm":
        return ref.pcmm(X, w.wq.entries)
    if kernel == "ccmm":
        return X @ X.T
    if kernel == "rope":
        return ref.rope_heads(X, att.heads, w.rope_base)
    if kernel == "attention":
        sig = att.sigmoid_approx() if approximate else None
        return ref.sigmoid_attention(X, X, X, att.heads, att.effective_bias, att.score_scale, sig)
    if kernel == "rmsnorm":
        sq, iv = (nc.sqrt_approx(), nc.inverse_approx()) if approximate else (None, None)
        return ref.rmsnorm(X, w.gamma_attn, nc.eps, sq, iv)
    if kernel == "ffn":
        from . import approx as ax

        sil = ax.fit_sigmoid(0.0, tuple(cfg.silu.domain), cfg.silu.degree) if approximate else None
        return ref.swiglu_ffn(X, w.w1.entries, w.w2.entries, w.w3.entries, sil)
    if kernel == "layer":
        return layer_reference(X, w, cfg, approximate)
    raise ValueError(f"unknown kernel {kernel!r}; choose from {KERNELS}")
