"""Spatiality-guided captioning transformer."""

from .config import ABLATION_PRESETS, DECODER_KINDS, FULL_SCALE, POS_ENC_KINDS, ModelConfig
from .decoder import (Decoder, build_target_aware_mask, causal_mask, decode_teacher_forced,
                      greedy_decode)
from .encoder import Encoder, EncoderOutput, RelationHead, pair_contributions
from .layers import Module
from .network import CaptionNet, Detections, refine_boxes
from .posenc import (PositionalEncoding, make_positional_encoding, positional_encode_votes,
                     sinusoidal_table)

__all__ = [
    "ABLATION_PRESETS", "DECODER_KINDS", "FULL_SCALE", "POS_ENC_KINDS", "ModelConfig", "Decoder",
    "build_target_aware_mask", "causal_mask", "decode_teacher_forced", "greedy_decode", "Encoder",
    "EncoderOutput", "RelationHead", "pair_contributions", "Module", "CaptionNet", "Detections",
    "refine_boxes", "PositionalEncoding", "make_positional_encoding", "positional_encode_votes",
    "sinusoidal_table",
]
