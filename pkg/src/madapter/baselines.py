"""Comparison length adapters: a 3-layer strided CNN (8x compression) and a
3-layer plain transformer stack (no length change)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import PoolConfig, SequenceTooShortError, Tensor, conv1d, out_len, relu
from .attention import ConvWeights, build_conv_weights
from .adapter import BlockWeights, block_forward, build_block_weights

CNN_STAGES = 3
CNN_POOL = PoolConfig(kernel=3, stride=2, padding=1)
TRANSFORMER_BLOCKS = 3


@dataclass
class CnnAdapterWeights:
    convs: list[ConvWeights]


@dataclass
class TransformerAdapterWeights:
    blocks: list[BlockWeights]


def build_cnn_adapter_weights(
    rng: np.random.Generator, prefix: str, embed_dim: int
) -> CnnAdapterWeights:
    return CnnAdapterWeights(
        convs=[
            build_conv_weights(rng, f"{prefix}.conv{i}", embed_dim, CNN_POOL.kernel)
            for i in range(CNN_STAGES)
        ]
    )


def build_transformer_adapter_weights(
    rng: np.random.Generator, prefix: str, embed_dim: int, ffn_width: int
) -> TransformerAdapterWeights:
    return TransformerAdapterWeights(
        blocks=[
            build_block_weights(rng, f"{prefix}.block{i}", embed_dim, ffn_width)
            for i in range(TRANSFORMER_BLOCKS)
        ]
    )


def cnn_adapter_forward(x: Tensor, w: CnnAdapterWeights) -> Tensor:
    """Three stride-2 conv stages with ReLU between them; ~8x shorter."""
    out = x
    for i, cw in enumerate(w.convs):
        try:
            out_len(out.shape[0], CNN_POOL)
        except SequenceTooShortError as e:
            raise SequenceTooShortError(f"cnn adapter stage {i}: {e}") from None
        if i > 0:
            out = relu(out)
        out = conv1d(out, cw.w, cw.b, CNN_POOL)
    return out


def cnn_adapter_out_len(length: int) -> int:
    for _ in range(CNN_STAGES):
        length = out_len(length, CNN_POOL)
    return length


def transformer_adapter_forward(
    x: Tensor, w: TransformerAdapterWeights, heads: int
) -> Tensor:
    """Three standard post-LN blocks; length preserved."""
    out = x
    for bw in w.blocks:
        out = block_forward(out, bw, heads)
    return out
