"""Fused differentiable primitives used by the captioning network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_op

LN_EPS = 1e-5
BN_EPS = 1e-5


def softmax_masked(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks *allowed* positions.

    Disallowed positions get probability exactly 0.
    """
    x = logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_masked: a row has every position masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (logits,), backward)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return make_op(y, (logits,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis, then apply the affine ``gamma``/``beta``."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    c = d.shape[-1]
    lead = tuple(range(d.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / c)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(out, (x, gamma, beta), backward)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, c: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(c), np.ones(c), momentum)


def batch_norm_1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                  training: bool, eps: float = BN_EPS) -> Tensor:
    """Batch normalisation over rows of a ``b x c`` input."""
    d = x.data
    if d.ndim != 2:
        raise ValueError("batch_norm_1d expects a 2-D (batch, channels) input")
    b = d.shape[0]
    if not training:
        xhat = (d - state.running_mean) / np.sqrt(state.running_var + eps)
        inv = 1.0 / np.sqrt(state.running_var + eps)
        return make_op(xhat * gamma.data + beta.data, (x, gamma, beta),
                       lambda g: (g * gamma.data * inv, (g * xhat).sum(0), g.sum(0)))
    if b < 2:
        raise ValueError(f"batch_norm_1d in training mode needs at least 2 rows, got {b}")
    mu = d.mean(axis=0)
    xc = d - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu
    state.running_var = (1 - m) * state.running_var + m * var * b / (b - 1)

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        return gx, (g * xhat).sum(0), g.sum(0)

    return make_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def cross_entropy_logits(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood over rows not flagged in ``ignore_mask``."""
    x = logits.data
    if x.ndim != 2:
        raise ValueError("cross_entropy_logits expects (n, k) logits")
    n, k = x.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ValueError("targets length must match logits rows")
    keep = np.ones(n, bool) if ignore_mask is None else ~np.asarray(ignore_mask, bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy_logits: every row is ignored")
    safe_t = np.where(keep, targets, 0)
    if ((safe_t < 0) | (safe_t >= k)).any():
        raise ValueError("target class index out of range")
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[np.arange(n), safe_t]
    loss = float((nll * keep).sum() / count)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), safe_t] -= 1.0
        p *= (keep / count)[:, None]
        return (p * g,)

    return make_op(np.array(loss), (logits,), backward)


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss (quadratic below ``beta``), not reduced."""
    t = np.asarray(target, dtype=np.float64)
    r = pred.data - t
    a = np.abs(r)
    quad = a < beta
    out = np.where(quad, 0.5 * r * r / beta, a - 0.5 * beta)
    return make_op(out, (pred,), lambda g: (g * np.where(quad, r / beta, np.sign(r)),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``x`` of any leading shape."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(0)

    return make_op(out, parents, backward)
