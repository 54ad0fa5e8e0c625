"""Full captioning network: detector head, encoder, relation head, decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor
from .config import ModelConfig
from .decoder import Decoder, greedy_decode
from .encoder import Encoder, EncoderOutput, RelationHead, pair_contributions
from .layers import Linear, Module
from .posenc import PositionalEncoding


class DetectorHead(Module):
    """Learned embedding of simulated proposals plus detection outputs."""

    def __init__(self, raw_dim: int, c: int, n_classes: int, rng: np.random.Generator):
        self.embed = Linear(raw_dim, c, rng)
        self.objectness = Linear(c, 2, rng)
        self.classes = Linear(c, n_classes, rng)
        self.box = Linear(c, 6, rng)


@dataclass
class Detections:
    features: Tensor         # (B, M, C)
    objectness: Tensor       # (B, M, 2)
    class_logits: Tensor     # (B, M, K)
    box_residuals: Tensor    # (B, M, 6)


class CaptionNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        c = cfg.c_model
        self.detector = DetectorHead(cfg.raw_dim, c, cfg.n_classes, rng)
        if cfg.use_encoder:
            self.posenc = PositionalEncoding(cfg.pos_enc_kind, c, cfg.m_proposals, rng)
            self.encoder = Encoder(c, cfg.n_blocks, cfg.n_heads, cfg.ffn_width, rng)
        if cfg.use_t2t:
            self.rph = RelationHead(c, rng)
        self.decoder = Decoder(cfg.decoder_kind, c, cfg.n_blocks, cfg.n_heads, cfg.ffn_width,
                               cfg.vocab_size, cfg.max_caption_len, rng)

    def detect(self, raw: np.ndarray) -> Detections:
        d = self.detector
        feats = d.embed(Tensor(raw))
        return Detections(feats, d.objectness(feats), d.classes(feats), d.box(feats))

    def encode(self, features: Tensor, centers: np.ndarray, boxes: np.ndarray) -> EncoderOutput:
        """Vision tokens for the decoder; passes features through when the encoder is off."""
        if not self.cfg.use_encoder:
            return EncoderOutput(features, None, None)
        tokens = features + self.posenc(centers, boxes)
        out = self.encoder(tokens)
        if self.cfg.use_t2t:
            out.pair_features = pair_contributions(out.last_attention, out.last_values)
            out.relation_logits = self.rph(out.pair_features)
        return out

    def forward_scene(self, raw: np.ndarray, centers: np.ndarray, boxes: np.ndarray):
        """Detection + encoding for a batch of scenes (leading dimension B)."""
        det = self.detect(raw)
        refined = refine_boxes(boxes, det.box_residuals.data)
        return det, self.encode(det.features, centers, refined)

    def caption_logits(self, enc: EncoderOutput, token_index: np.ndarray, words: np.ndarray):
        """Teacher-forced logits for flat proposal indices into (B*M)."""
        b, m, c = enc.tokens.shape
        targets = enc.tokens.reshape(b * m, c)[np.asarray(token_index, dtype=np.int64)]
        return self.decoder(targets, words)

    def caption(self, enc: EncoderOutput, token_index, sos_id: int, eos_id: int,
                return_attention: bool = False):
        b, m, c = enc.tokens.shape
        targets = enc.tokens.reshape(b * m, c)[np.asarray(token_index, dtype=np.int64)]
        return greedy_decode(self.decoder, targets, sos_id, eos_id, self.cfg.max_caption_len,
                             return_attention)


def refine_boxes(boxes: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    """Apply predicted (center, size) residuals; sizes are kept positive."""
    out = boxes + residuals
    out[..., 3:] = np.maximum(out[..., 3:], 1e-3)
    return out
