"""Relation-supervised transformer encoder over proposal tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, relu
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention


@dataclass
class EncoderOutput:
    tokens: Tensor                   # (B, M, C)
    last_attention: Tensor           # (B, H, M, M)
    last_values: Tensor              # (B, H, M, d)
    pair_features: Tensor | None = None    # (B, M, M, C)
    relation_logits: Tensor | None = None  # (B, M, M, 9)


class EncoderBlock(Module):
    def __init__(self, c: int, n_heads: int, ffn_width: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(c)
        self.attn = MultiHeadAttention(c, n_heads, rng)
        self.ln2 = LayerNorm(c)
        self.ffn = FeedForward(c, ffn_width, rng)

    def __call__(self, x: Tensor):
        h = self.ln1(x)
        a, w, v = self.attn(h, h)
        x = x + a
        x = x + self.ffn(self.ln2(x))
        return x, w, v


class Encoder(Module):
    def __init__(self, c: int, n_blocks: int, n_heads: int, ffn_width: int, rng: np.random.Generator):
        self.blocks = [EncoderBlock(c, n_heads, ffn_width, rng) for _ in range(n_blocks)]
        self.ln_f = LayerNorm(c)

    def __call__(self, x: Tensor) -> EncoderOutput:
        w = v = None
        for block in self.blocks:
            x, w, v = block(x)
        return EncoderOutput(self.ln_f(x), w, v)


def pair_contributions(weights: Tensor, values: Tensor) -> Tensor:
    """g[b, i, j] = concat_h(w[b, h, i, j] * v[b, h, j]) -> (B, M, M, C)."""
    b, h, m, _ = weights.shape
    d = values.shape[-1]
    g = weights.reshape(b, h, m, m, 1) * values.reshape(b, h, 1, m, d)
    return g.transpose(0, 2, 3, 1, 4).reshape(b, m, m, h * d)


class RelationHead(Module):
    """Three-layer MLP: two ReLU hidden layers of width C, 9 output logits.

    Logits are grouped per axis (x, y, z), classes ordered (-1, 0, +1).
    """

    def __init__(self, c: int, rng: np.random.Generator):
        self.fc1 = Linear(c, c, rng)
        self.fc2 = Linear(c, c, rng)
        self.fc3 = Linear(c, 9, rng)

    def __call__(self, pair_features: Tensor) -> Tensor:
        return self.fc3(relu(self.fc2(relu(self.fc1(pair_features)))))
