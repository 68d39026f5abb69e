"""Length-compressing adapter layer: pooled attention, pooled residual,
layer norms and a feedforward, stackable N deep.

One layer shrinks the sequence by roughly its pooling stride. Ablation
variants move the pooling out of the attention: before it (b4p), between
attention and feedforward (b4f), or after the whole block (b4o). A further
inference-time mode bypasses attention mixing entirely and keeps only the
pooled value path ("local aggregation only").
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .autodiff import (
    Parameter,
    PoolConfig,
    SequenceTooShortError,
    Tensor,
    add,
    conv1d,
    layer_norm,
    matmul,
    out_len,
    relu,
    uniform_parameter,
)
from .attention import (
    ConvWeights,
    MpsaWeights,
    build_conv_weights,
    build_mpsa_weights,
    mpsa_forward,
    multi_head_attention,
    pool_qkv,
    project_qkv,
    shared_pool_config,
)

# Strides past this stop compressing usefully at the preset scale; enforced
# for the presets only, not for the general conv op.
MAX_PRESET_STRIDE = 8


class PoolPosition(str, Enum):
    INSIDE = "inside"
    BEFORE_ATTENTION = "b4p"
    BEFORE_FFN = "b4f"
    AFTER_OUTPUT = "b4o"


@dataclass(frozen=True)
class AdapterConfig:
    embed_dim: int
    heads: int
    pool: PoolConfig
    ffn_width: int = 0  # 0 means the 4*embed_dim default
    position: PoolPosition = PoolPosition.INSIDE
    layers: int = 1

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.ffn_width == 0:
            object.__setattr__(self, "ffn_width", 4 * self.embed_dim)

    @property
    def mpsa(self):
        return shared_pool_config(self.embed_dim, self.heads, self.pool)


def mada1_config(embed_dim: int, heads: int, stride: int = 8) -> AdapterConfig:
    """Single layer with kernel 8, padding 4; stride 8 by default."""
    if not 1 <= stride <= MAX_PRESET_STRIDE:
        raise ValueError(f"preset stride {stride} outside 1..{MAX_PRESET_STRIDE}")
    return AdapterConfig(embed_dim, heads, PoolConfig(kernel=8, stride=stride, padding=4), layers=1)


def mada3_config(embed_dim: int, heads: int) -> AdapterConfig:
    """Three layers with kernel 3, stride 2, padding 1 (8x total)."""
    return AdapterConfig(embed_dim, heads, PoolConfig(kernel=3, stride=2, padding=1), layers=3)


@dataclass
class BlockWeights:
    """Plain post-LN transformer block: attention, two layer norms, FFN."""

    attn: MpsaWeights
    ln1_gain: Parameter
    ln1_offset: Parameter
    ln2_gain: Parameter
    ln2_offset: Parameter
    ffn_w1: Parameter
    ffn_b1: Parameter
    ffn_w2: Parameter
    ffn_b2: Parameter


@dataclass
class AdapterLayerWeights(BlockWeights):
    """Block weights plus the residual-path pooling conv."""

    pool_x: ConvWeights = field(default=None)  # set by the builder


def build_block_weights(
    rng: np.random.Generator,
    prefix: str,
    embed_dim: int,
    ffn_width: int,
    pool: Optional[PoolConfig] = None,
) -> BlockWeights:
    d, w = embed_dim, ffn_width
    return BlockWeights(
        attn=build_mpsa_weights(rng, f"{prefix}.attn", d, pool=pool),
        ln1_gain=Parameter(f"{prefix}.ln1.gain", np.ones(d, dtype=np.float32)),
        ln1_offset=Parameter(f"{prefix}.ln1.offset", np.zeros(d, dtype=np.float32)),
        ln2_gain=Parameter(f"{prefix}.ln2.gain", np.ones(d, dtype=np.float32)),
        ln2_offset=Parameter(f"{prefix}.ln2.offset", np.zeros(d, dtype=np.float32)),
        ffn_w1=uniform_parameter(rng, f"{prefix}.ffn.w1", (d, w), fan_in=d),
        ffn_b1=uniform_parameter(rng, f"{prefix}.ffn.b1", (w,), fan_in=d),
        ffn_w2=uniform_parameter(rng, f"{prefix}.ffn.w2", (w, d), fan_in=w),
        ffn_b2=uniform_parameter(rng, f"{prefix}.ffn.b2", (d,), fan_in=w),
    )


def build_adapter_layer_weights(
    rng: np.random.Generator, prefix: str, cfg: AdapterConfig
) -> AdapterLayerWeights:
    # Q/K/V pooling convs exist only for the Inside variant; the ablation
    # variants pool with the residual conv and attend unpooled.
    pool = cfg.pool if cfg.position is PoolPosition.INSIDE else None
    base = build_block_weights(rng, prefix, cfg.embed_dim, cfg.ffn_width, pool=pool)
    w = AdapterLayerWeights(**vars(base))
    w.pool_x = build_conv_weights(rng, f"{prefix}.pool_x", cfg.embed_dim, cfg.pool.kernel)
    return w


def build_adapter_stack_weights(
    rng: np.random.Generator, prefix: str, cfg: AdapterConfig
) -> list[AdapterLayerWeights]:
    return [build_adapter_layer_weights(rng, f"{prefix}.{i}", cfg) for i in range(cfg.layers)]


def ffn_forward(z: Tensor, w: BlockWeights) -> Tensor:
    h = relu(add(matmul(z, w.ffn_w1), w.ffn_b1))
    return add(matmul(h, w.ffn_w2), w.ffn_b2)


def _block_tail(h: Tensor, residual: Tensor, w: BlockWeights) -> Tensor:
    z = layer_norm(add(h, residual), w.ln1_gain, w.ln1_offset)
    return layer_norm(add(ffn_forward(z, w), z), w.ln2_gain, w.ln2_offset)


def block_forward(x: Tensor, w: BlockWeights, heads: int, mask: Optional[Tensor] = None) -> Tensor:
    """Standard post-LN transformer block; length preserved."""
    h = multi_head_attention(x, x, x, w.attn, heads, mask=mask)
    return _block_tail(h, x, w)


def adapter_layer_forward(x: Tensor, w: AdapterLayerWeights, cfg: AdapterConfig) -> Tensor:
    """One adapter layer; output length is out_len(L, cfg.pool) in every variant."""
    pos = cfg.position
    if pos is PoolPosition.INSIDE:
        h = mpsa_forward(x, w.attn, cfg.mpsa)
        xr = conv1d(x, w.pool_x.w, w.pool_x.b, cfg.pool)
        return _block_tail(h, xr, w)
    if pos is PoolPosition.BEFORE_ATTENTION:
        xr = conv1d(x, w.pool_x.w, w.pool_x.b, cfg.pool)
        h = multi_head_attention(xr, xr, xr, w.attn, cfg.heads)
        return _block_tail(h, xr, w)
    if pos is PoolPosition.BEFORE_FFN:
        h = multi_head_attention(x, x, x, w.attn, cfg.heads)
        z = layer_norm(add(h, x), w.ln1_gain, w.ln1_offset)
        zp = conv1d(z, w.pool_x.w, w.pool_x.b, cfg.pool)
        return layer_norm(add(ffn_forward(zp, w), zp), w.ln2_gain, w.ln2_offset)
    if pos is PoolPosition.AFTER_OUTPUT:
        y = block_forward(x, w, cfg.heads)
        return conv1d(y, w.pool_x.w, w.pool_x.b, cfg.pool)
    raise ValueError(f"unknown pooling position {pos}")


def local_only_forward(x: Tensor, w: AdapterLayerWeights, cfg: AdapterConfig) -> Tensor:
    """Inference-time bypass of attention mixing: the pooled value path V'
    stands in for the attention output; residual, norms and FFN unchanged."""
    if cfg.position is not PoolPosition.INSIDE:
        raise ValueError("local-only mode is defined for the Inside variant only")
    q, k, v = project_qkv(x, w.attn)
    _, _, vp = pool_qkv(q, k, v, w.attn, cfg.mpsa)
    xr = conv1d(x, w.pool_x.w, w.pool_x.b, cfg.pool)
    return _block_tail(vp, xr, w)


def adapter_stack_forward(
    x: Tensor,
    weights: list[AdapterLayerWeights],
    cfg: AdapterConfig,
    local_only: bool = False,
    layer_hook: Optional[Callable[[int, Tensor], Tensor]] = None,
) -> Tensor:
    """Apply the layers in sequence; lengths compose by the pooling formula.

    layer_hook, when given, may replace each layer's output (inference
    instrumentation, e.g. perturbation); it must preserve the shape.
    """
    out = x
    for i, w in enumerate(weights):
        try:
            out_len(out.shape[0], cfg.pool)
        except SequenceTooShortError as e:
            raise SequenceTooShortError(f"adapter layer {i}: {e}") from None
        out = (
            local_only_forward(out, w, cfg)
            if local_only
            else adapter_layer_forward(out, w, cfg)
        )
        if layer_hook is not None:
            out = layer_hook(i, out)
    return out


def stack_out_len(length: int, cfg: AdapterConfig) -> int:
    for _ in range(cfg.layers):
        length = out_len(length, cfg.pool)
    return length
