"""Parameter containers and transformer building blocks."""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import BatchNormState, Tensor, batch_norm_1d, layer_norm, linear, relu, softmax_masked
from ..autodiff.tensor import make_op


class Module:
    """Attribute-walking parameter registry (Tensors, sub-modules, lists of them)."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, BatchNormState):
                yield full + ".running_mean", value, "running_mean"
                yield full + ".running_var", value, "running_var"
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, state, attr in self.named_buffers():
            out[name] = getattr(state, attr).copy()
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        expected = set()
        for name, p in self.named_parameters():
            expected.add(name)
            if name not in tensors:
                raise KeyError(f"missing parameter {name}")
            if tensors[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.data.shape}")
            p.data[...] = tensors[name]
        for name, state, attr in self.named_buffers():
            expected.add(name)
            setattr(state, attr, np.array(tensors[name], dtype=np.float64))
        if strict:
            unexpected = set(tensors) - expected
            if unexpected:
                raise KeyError(f"unexpected tensors in state: {sorted(unexpected)[:5]}")


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = param(rng.uniform(-bound, bound, (n_in, n_out)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c: int):
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class BatchNorm1d(Module):
    def __init__(self, c: int, momentum: float = 0.1):
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))
        self.state = BatchNormState.create(c, momentum)

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm_1d(x, self.gamma, self.beta, self.state, self.training)


class FeedForward(Module):
    def __init__(self, c: int, width: int, rng: np.random.Generator):
        self.fc1 = Linear(c, width, rng)
        self.fc2 = Linear(width, c, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


def split_heads(x: Tensor, h: int) -> Tensor:
    """(B, N, C) -> (B, H, N, C/H)."""
    b, n, c = x.shape
    return x.reshape(b, n, h, c // h).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


def batched_matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched ``a @ b`` (or ``a @ b^T``) over matching leading dimensions."""
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if transpose_b:
                gb = np.swapaxes(gb, -1, -2)
        return ga, gb

    return make_op(a.data @ bd, (a, b), backward)


class MultiHeadAttention(Module):
    def __init__(self, c: int, n_heads: int, rng: np.random.Generator):
        if c % n_heads:
            raise ValueError("feature width must be divisible by the head count")
        self.n_heads = n_heads
        self.q = Linear(c, c, rng)
        self.k = Linear(c, c, rng)
        self.v = Linear(c, c, rng)
        self.o = Linear(c, c, rng)

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None = None):
        """Returns ``(output, weights (B,H,Nq,Nk), values (B,H,Nk,d))``."""
        h = self.n_heads
        q = split_heads(self.q(xq), h)
        k = split_heads(self.k(xkv), h)
        v = split_heads(self.v(xkv), h)
        scale = 1.0 / math.sqrt(q.shape[-1])
        scores = batched_matmul(q, k, transpose_b=True) * scale
        w = softmax_masked(scores, mask)
        out = self.o(merge_heads(batched_matmul(w, v)))
        return out, w, v
