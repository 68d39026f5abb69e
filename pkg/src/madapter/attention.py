"""Multi-head pooled self-attention (MPSA).

The block projects an input sequence to Q, K, V, pools each with its own
strided 1D convolution, attends per head on the pooled matrices, and
concatenates the heads. With identity pooling it degenerates to plain
multi-head self-attention, which is also exposed here for the unpooled
blocks (baseline adapter, decoder).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    DimensionError,
    Parameter,
    PoolConfig,
    Tensor,
    add,
    concat_cols,
    conv1d,
    matmul,
    no_tape,
    out_len,
    scale,
    slice_cols,
    softmax_rows,
    transpose,
    uniform_parameter,
)


@dataclass(frozen=True)
class MpsaConfig:
    embed_dim: int
    heads: int
    pool_q: PoolConfig
    pool_k: PoolConfig
    pool_v: PoolConfig

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        # Q'K'^T and V' only line up if all three pools give the same L' for
        # every L, i.e. equal strides and equal (kernel - 2*padding).
        strides = {p.stride for p in (self.pool_q, self.pool_k, self.pool_v)}
        spans = {p.kernel - 2 * p.padding for p in (self.pool_q, self.pool_k, self.pool_v)}
        if len(strides) != 1 or len(spans) != 1:
            raise ValueError(
                "pool_q/pool_k/pool_v must yield identical output lengths for any input length"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def shared_pool_config(embed_dim: int, heads: int, pool: PoolConfig) -> MpsaConfig:
    """One pooling geometry shared by Q, K and V (the default)."""
    return MpsaConfig(embed_dim=embed_dim, heads=heads, pool_q=pool, pool_k=pool, pool_v=pool)


@dataclass
class ConvWeights:
    w: Parameter  # (C_out, C_in, k)
    b: Parameter  # (C_out,)


@dataclass
class MpsaWeights:
    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    pool_q: Optional[ConvWeights] = None
    pool_k: Optional[ConvWeights] = None
    pool_v: Optional[ConvWeights] = None


def build_conv_weights(rng: np.random.Generator, prefix: str, dim: int, kernel: int) -> ConvWeights:
    return ConvWeights(
        w=uniform_parameter(rng, f"{prefix}.w", (dim, dim, kernel), fan_in=dim * kernel),
        b=uniform_parameter(rng, f"{prefix}.b", (dim,), fan_in=dim * kernel),
    )


def build_mpsa_weights(
    rng: np.random.Generator,
    prefix: str,
    embed_dim: int,
    pool: Optional[PoolConfig] = None,
) -> MpsaWeights:
    """Projection weights, plus one pooling conv per Q/K/V when pooled."""
    d = embed_dim
    w = MpsaWeights(
        w_q=uniform_parameter(rng, f"{prefix}.w_q", (d, d), fan_in=d),
        w_k=uniform_parameter(rng, f"{prefix}.w_k", (d, d), fan_in=d),
        w_v=uniform_parameter(rng, f"{prefix}.w_v", (d, d), fan_in=d),
    )
    if pool is not None:
        w.pool_q = build_conv_weights(rng, f"{prefix}.pool_q", d, pool.kernel)
        w.pool_k = build_conv_weights(rng, f"{prefix}.pool_k", d, pool.kernel)
        w.pool_v = build_conv_weights(rng, f"{prefix}.pool_v", d, pool.kernel)
    return w


def identity_conv_weights(name: str, dim: int) -> ConvWeights:
    """k=1 conv that maps each channel to itself; makes pooling a no-op."""
    w = np.zeros((dim, dim, 1), dtype=np.float32)
    w[np.arange(dim), np.arange(dim), 0] = 1.0
    return ConvWeights(
        w=Parameter(f"{name}.w", w),
        b=Parameter(f"{name}.b", np.zeros(dim, dtype=np.float32)),
    )


def project_qkv(x: Tensor, w: MpsaWeights) -> tuple[Tensor, Tensor, Tensor]:
    """Linear projections Q = xW_q, K = xW_k, V = xW_v (length unchanged)."""
    return matmul(x, w.w_q), matmul(x, w.w_k), matmul(x, w.w_v)


def pool_qkv(
    q: Tensor, k: Tensor, v: Tensor, w: MpsaWeights, cfg: MpsaConfig
) -> tuple[Tensor, Tensor, Tensor]:
    """Pool each projection with its own conv; all outputs share L'."""
    if w.pool_q is None or w.pool_k is None or w.pool_v is None:
        raise ValueError("pooling weights missing; build_mpsa_weights(pool=...) required")
    return (
        conv1d(q, w.pool_q.w, w.pool_q.b, cfg.pool_q),
        conv1d(k, w.pool_k.w, w.pool_k.b, cfg.pool_k),
        conv1d(v, w.pool_v.w, w.pool_v.b, cfg.pool_v),
    )


def _attend_heads(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Optional[Tensor] = None) -> Tensor:
    d = q.shape[1] // heads
    outs = []
    for j in range(heads):
        qj = slice_cols(q, j * d, (j + 1) * d)
        kj = slice_cols(k, j * d, (j + 1) * d)
        vj = slice_cols(v, j * d, (j + 1) * d)
        scores = scale(matmul(qj, transpose(kj)), 1.0 / math.sqrt(d))
        if mask is not None:
            scores = add(scores, mask)
        outs.append(matmul(softmax_rows(scores), vj))
    return concat_cols(outs)


def pooled_attention(qp: Tensor, kp: Tensor, vp: Tensor, cfg: MpsaConfig) -> Tensor:
    """Per-head softmax(Q'K'^T / sqrt(d)) V', heads concatenated to (L', D)."""
    if not (qp.shape == kp.shape == vp.shape):
        raise DimensionError(
            f"pooled Q/K/V must share shape, got {qp.shape} {kp.shape} {vp.shape}"
        )
    if qp.shape[1] != cfg.embed_dim:
        raise DimensionError(f"embedding dim {qp.shape[1]} != configured {cfg.embed_dim}")
    return _attend_heads(qp, kp, vp, cfg.heads)


def mpsa_forward(x: Tensor, w: MpsaWeights, cfg: MpsaConfig) -> Tensor:
    """project -> pool -> attend; output length is out_len(L, cfg.pool_q)."""
    q, k, v = project_qkv(x, w)
    qp, kp, vp = pool_qkv(q, k, v, w, cfg)
    return pooled_attention(qp, kp, vp, cfg)


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    w: MpsaWeights,
    heads: int,
    mask: Optional[Tensor] = None,
) -> Tensor:
    """Plain multi-head attention (no pooling); q_in may differ from k_in/v_in."""
    q = matmul(q_in, w.w_q)
    k = matmul(k_in, w.w_k)
    v = matmul(v_in, w.w_v)
    return _attend_heads(q, k, v, heads, mask=mask)


def attention_head_matrices(x: Tensor, w: MpsaWeights, cfg: MpsaConfig) -> list[np.ndarray]:
    """Per-head pooled attention matrices, for diagnostics (forward only)."""
    with no_tape():
        q, k, v = project_qkv(x, w)
        qp, kp, _ = pool_qkv(q, k, v, w, cfg)
        d = cfg.head_dim
        mats = []
        for j in range(cfg.heads):
            qj = slice_cols(qp, j * d, (j + 1) * d)
            kj = slice_cols(kp, j * d, (j + 1) * d)
            a = softmax_rows(scale(matmul(qj, transpose(kj)), 1.0 / math.sqrt(d)))
            mats.append(a.data.copy())
    return mats


def mpsa_out_len(length: int, cfg: MpsaConfig) -> int:
    return out_len(length, cfg.pool_q)
