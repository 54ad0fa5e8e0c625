from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

POS_ENC_KINDS = ("none", "sinusoidal", "random", "box_center", "box_center_size", "vote_center")
DECODER_KINDS = ("early_guide", "late_guide")


@dataclass(frozen=True)
class ModelConfig:
    c_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    ffn_width: int = 256
    vocab_size: int = 37
    max_caption_len: int = 30
    pos_enc_kind: str = "vote_center"
    decoder_kind: str = "early_guide"
    use_encoder: bool = True
    use_t2t: bool = True
    m_proposals: int = 16
    raw_dim: int = 24
    n_classes: int = 8
    init_seed: int = 0

    def __post_init__(self):
        if self.c_model % self.n_heads:
            raise ValueError("c_model must be divisible by n_heads")
        if self.pos_enc_kind not in POS_ENC_KINDS:
            raise ValueError(f"unknown positional encoding kind {self.pos_enc_kind!r}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ValueError(f"unknown decoder kind {self.decoder_kind!r}")
        if self.use_t2t and not self.use_encoder:
            raise ValueError("relation supervision needs the encoder")
        for name in ("c_model", "n_blocks", "n_heads", "ffn_width", "vocab_size",
                     "max_caption_len", "m_proposals", "raw_dim", "n_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def with_preset(self, preset: str | None) -> "ModelConfig":
        if not preset:
            return self
        if preset not in ABLATION_PRESETS:
            raise ValueError(f"unknown ablation preset {preset!r}; choose from {sorted(ABLATION_PRESETS)}")
        return replace(self, **ABLATION_PRESETS[preset])


# component ablation rows plus the plain-transformer baseline
ABLATION_PRESETS: dict[str, dict] = {
    "model-a": dict(decoder_kind="late_guide", use_encoder=False, use_t2t=False),
    "model-b": dict(decoder_kind="early_guide", use_encoder=False, use_t2t=False),
    "model-c": dict(decoder_kind="early_guide", use_encoder=True, use_t2t=False),
    "model-d": dict(decoder_kind="early_guide", use_encoder=True, use_t2t=True),
    "no-t2t": dict(use_t2t=False),
    "base": dict(pos_enc_kind="sinusoidal", decoder_kind="late_guide", use_encoder=True,
                 use_t2t=False),
}
ABLATION_PRESETS.update({f"pe-{k.replace('_', '-')}": dict(pos_enc_kind=k) for k in POS_ENC_KINDS})

FULL_SCALE = dict(c_model=128, n_blocks=6, n_heads=8, ffn_width=2048, m_proposals=256)
