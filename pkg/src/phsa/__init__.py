"""Phonetic self-attention at desk scale: score variants M1-M5, a mixed encoder,
a synthetic phoneme task and attention analysis tools."""

from .attention import AttentionHeadParams, Drop, Variant, attention_head_forward, multi_head_forward, score
from .encoder import ConfigError, EncoderConfig, encoder_forward, term_ablated_forward
from .numeric import Precision, Tape, Tensor, grad_check

__all__ = [
    "AttentionHeadParams",
    "ConfigError",
    "Drop",
    "EncoderConfig",
    "Precision",
    "Tape",
    "Tensor",
    "Variant",
    "attention_head_forward",
    "encoder_forward",
    "grad_check",
    "multi_head_forward",
    "score",
    "term_ablated_forward",
]
