"""Object-centric caption decoder (early- and late-guide conditioning)."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, concat, getitem, no_grad
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param
from .posenc import sinusoidal_table


def build_target_aware_mask(caption_len: int) -> np.ndarray:
    """Allowed-attention matrix with the target vision token at position 0.

    Word position t (1-based) sees {0, ..., t}; the target sees only itself.
    """
    if caption_len < 1:
        raise ValueError("caption length must be at least 1")
    return np.tril(np.ones((caption_len + 1, caption_len + 1), dtype=bool))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


class EarlyGuideBlock(Module):
    def __init__(self, c, n_heads, ffn_width, rng):
        self.ln1 = LayerNorm(c)
        self.attn = MultiHeadAttention(c, n_heads, rng)
        self.ln2 = LayerNorm(c)
        self.ffn = FeedForward(c, ffn_width, rng)

    def __call__(self, x, mask):
        h = self.ln1(x)
        a, w, _ = self.attn(h, h, mask)
        x = x + a
        return x + self.ffn(self.ln2(x)), w


class LateGuideBlock(Module):
    def __init__(self, c, n_heads, ffn_width, rng):
        self.ln1 = LayerNorm(c)
        self.attn = MultiHeadAttention(c, n_heads, rng)
        self.ln_c = LayerNorm(c)
        self.cross = MultiHeadAttention(c, n_heads, rng)
        self.ln2 = LayerNorm(c)
        self.ffn = FeedForward(c, ffn_width, rng)

    def __call__(self, x, target, mask):
        h = self.ln1(x)
        a, _, _ = self.attn(h, h, mask)
        x = x + a
        a, w, _ = self.cross(self.ln_c(x), target)
        x = x + a
        return x + self.ffn(self.ln2(x)), w


class Decoder(Module):
    def __init__(self, kind: str, c: int, n_blocks: int, n_heads: int, ffn_width: int,
                 vocab_size: int, max_len: int, rng: np.random.Generator):
        self.kind = kind
        self.c = c
        self.max_len = max_len
        self.embed = param(rng.normal(0.0, 1.0, (vocab_size, c)))
        block = EarlyGuideBlock if kind == "early_guide" else LateGuideBlock
        self.blocks = [block(c, n_heads, ffn_width, rng) for _ in range(n_blocks)]
        self.ln_f = LayerNorm(c)
        self.out = Linear(c, vocab_size, rng)
        self._pe = sinusoidal_table(max_len, c)

    def __call__(self, target: Tensor, words: np.ndarray):
        """Next-word logits (T, L, V) for targets (T, C) and word ids (T, L).

        The second result holds last-block attention of every word position
        onto the target token, shaped (T, H, L).
        """
        words = np.asarray(words, dtype=np.int64)
        t, length = words.shape
        if length > self.max_len:
            raise ValueError(f"caption input of length {length} exceeds max_caption_len={self.max_len}")
        x = getitem(self.embed, words) + Tensor(self._pe[:length])
        tgt = target.reshape(t, 1, self.c)
        if self.kind == "early_guide":
            mask = build_target_aware_mask(length)
            x = concat([tgt, x], axis=1)
            for block in self.blocks:
                x, w = block(x, mask)
            feats = self.ln_f(x)[:, 1:, :]
            target_attn = w.data[:, :, 1:, 0]
        else:
            mask = causal_mask(length)
            for block in self.blocks:
                x, w = block(x, tgt, mask)
            feats = self.ln_f(x)
            target_attn = w.data[:, :, :, 0]
        return self.out(feats), target_attn


def decode_teacher_forced(decoder: Decoder, target_token: Tensor, words) -> Tensor:
    """Single-target convenience wrapper: (C,), (L,) -> (L, V)."""
    logits, _ = decoder(target_token.reshape(1, -1), np.asarray(words)[None, :])
    return logits.reshape(logits.shape[1], logits.shape[2])


def greedy_decode(decoder: Decoder, targets: Tensor, sos_id: int, eos_id: int,
                  max_len: int | None = None, return_attention: bool = False):
    """Argmax decoding for a batch of target tokens (T, C).

    Returns one id list per target (without SOS/EOS); with
    ``return_attention`` also the per-word (H,) target attention lists.
    """
    max_len = max_len or decoder.max_len
    t = targets.shape[0]
    seqs = np.full((t, 1), sos_id, dtype=np.int64)
    done = np.zeros(t, dtype=bool)
    attn_steps = []
    with no_grad():
        for _ in range(max_len):
            logits, att = decoder(targets, seqs)
            nxt = np.argmax(logits.data[:, -1, :], axis=-1)
            nxt = np.where(done, eos_id, nxt)
            attn_steps.append(att[:, :, -1])
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == eos_id
            if done.all() or seqs.shape[1] > max_len:
                break
    out, attn = [], []
    for r in range(t):
        ids = []
        for k, tok in enumerate(seqs[r, 1:]):
            if tok == eos_id:
                break
            ids.append(int(tok))
        out.append(ids)
        attn.append([attn_steps[k][r].tolist() for k in range(len(ids))])
    return (out, attn) if return_attention else out
