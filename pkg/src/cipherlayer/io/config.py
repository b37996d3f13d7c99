"""Run configuration: HE parameters, model shape and approximation profiles in one JSON file."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from ..approx import ApproxProfile
from ..blocks import AttentionConfig, LayerConfig, NormConfig
from ..he.params import HeParams, preset

from ..pipeline import KERNELS
BACKENDS = ("clear", "ckks")


@dataclass(frozen=True)
class RunConfig:
    """Everything a client and server must agree on before an inference.

    Defaults describe the desk-scale layer: s=8, d=16, H=2, f=32 on a
    2^13 ring with 40 levels.
    """

    ring_degree: int = 2 ** 13
    max_level: int = 40
    refresh_cost: int = 2
    scale_bits: int = 40
    seq_len: int = 8
    model_dim: int = 16
    heads: int = 2
    ffn_dim: int = 32
    sigmoid_degree: int = 31
    sigmoid_domain: tuple[float, float] = (-8.0, 8.0)
    silu_degree: int = 31
    silu_domain: tuple[float, float] = (-8.0, 8.0)
    sqrt_degree: int = 31
    inverse_degree: int = 31
    variance_domain: tuple[float, float] = (0.25, 16.0)
    eps: float = 1e-5
    bias: float | None = None
    bias_mode: str = "default"
    head_scale: str = "head"
    rope_mode: str = "paired"
    rope_base: float = 10_000.0
    final_norm: bool = True
    backend: str = "ckks"
    kernel: str = "layer"
    seed: int = 0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.rope_mode not in ("paired", "faithful"):
            raise ValueError(f"unknown rope_mode {self.rope_mode!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in a u64")
        if self.seq_len > self.ring_degree // 2:
            raise ValueError(f"seq_len={self.seq_len} exceeds the {self.ring_degree // 2} slots")
        self.he_params()
        self.layer_config()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "preset" in d:
            p = preset(d.pop("preset"))
            d.setdefault("ring_degree", p.ring_degree)
            d.setdefault("max_level", p.max_level)
            d.setdefault("refresh_cost", p.refresh_cost)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for k in ("sigmoid_domain", "silu_domain", "variance_domain"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; sent with each request."""
        return hashlib.sha256(self.to_json().encode()).digest()

    def with_overrides(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_dict(d)

    def he_params(self) -> HeParams:
        return HeParams(ring_degree=self.ring_degree, max_level=self.max_level, refresh_cost=self.refresh_cost,
                        scale_bits=self.scale_bits)

    def layer_config(self) -> LayerConfig:
        att = AttentionConfig(self.heads, self.seq_len, self.model_dim, bias=self.bias, bias_mode=self.bias_mode,
                              head_scale=self.head_scale,
                              sigmoid=ApproxProfile(self.sigmoid_degree, self.sigmoid_domain))
        norm = NormConfig(eps=self.eps, variance_domain=self.variance_domain, sqrt_degree=self.sqrt_degree,
                          inverse_degree=self.inverse_degree)
        return LayerConfig(attention=att, ffn_dim=self.ffn_dim, norm=norm,
                           silu=ApproxProfile(self.silu_degree, self.silu_domain), rope_mode=self.rope_mode,
                           rope_base=self.rope_base, final_norm=self.final_norm)
