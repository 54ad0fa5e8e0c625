"""Encoder positional encodings: fixed, learned per slot, or projected geometry."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, relu
from .layers import BatchNorm1d, Linear, Module, param


def sinusoidal_table(n: int, c: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = 1.0 / 10000 ** (np.arange(0, c, 2) / c)
    table = np.zeros((n, c))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate)[:, : c // 2]
    return table


def positional_encode_votes(p: Tensor, w1: Linear, w2: Linear, bn: BatchNorm1d) -> Tensor:
    """Project (N, k) geometry to (N, C): linear, batch norm, ReLU, linear."""
    return w2(relu(bn(w1(p))))


class PositionalEncoding(Module):
    def __init__(self, kind: str, c: int, m: int, rng: np.random.Generator):
        self.kind = kind
        self.c = c
        self.m = m
        if kind == "random":
            self.table = param(rng.normal(0.0, 1.0, (m, c)))
        elif kind in ("box_center", "vote_center", "box_center_size"):
            n_in = 6 if kind == "box_center_size" else 3
            self.w1 = Linear(n_in, c, rng, bias=False)
            self.bn = BatchNorm1d(c)
            self.w2 = Linear(c, c, rng, bias=False)
        elif kind not in ("none", "sinusoidal"):
            raise ValueError(f"unknown positional encoding kind {kind!r}")

    @property
    def geometric(self) -> bool:
        return self.kind in ("box_center", "vote_center", "box_center_size")

    def __call__(self, centers: np.ndarray, boxes: np.ndarray) -> Tensor:
        """``centers`` (B, M, 3) proposal centers; ``boxes`` (B, M, 6) predicted boxes."""
        b, m = centers.shape[:2]
        if self.kind == "none":
            return Tensor(np.zeros((b, m, self.c)))
        if self.kind == "sinusoidal":
            return Tensor(np.broadcast_to(sinusoidal_table(m, self.c), (b, m, self.c)).copy())
        if self.kind == "random":
            if m != self.m:
                raise ValueError(f"random positional encoding was built for {self.m} slots, got {m}")
            return self.table.reshape(1, m, self.c) * Tensor(np.ones((b, 1, 1)))
        if self.kind == "vote_center":
            geo = centers
        elif self.kind == "box_center":
            geo = boxes[..., :3]
        else:
            geo = boxes
        flat = Tensor(np.asarray(geo, dtype=np.float64).reshape(b * m, -1))
        return positional_encode_votes(flat, self.w1, self.w2, self.bn).reshape(b, m, self.c)


def make_positional_encoding(kind: str, c: int, m: int, rng: np.random.Generator) -> PositionalEncoding:
    return PositionalEncoding(kind, c, m, rng)
