"""Pre-norm encoder stack mixing phonetic attention (lower) and vanilla attention (upper).

Layer ``i`` (0-based) runs M5 when ``i < num_phsa_layers`` and
``variant_for_upper`` otherwise.  Phonetic layers see no positional
information; sinusoidal absolute encodings are added to the residual stream
right before the first non-phonetic layer, which for a stack without
phonetic layers is the encoder input.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .attention import AttentionHeadParams, Drop, Variant, glorot, init_head, multi_head_forward
from .numeric import Precision, ShapeError, Tensor, add, as_tensor, layer_norm, matmul, swish


class ConfigError(ValueError):
    """Raised for configurations that violate their invariants."""


@dataclass
class EncoderConfig:
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 64
    d_h: int = 16
    ffn_dim: int = 128
    num_phsa_layers: int = 0
    variant_for_upper: Variant = Variant.M2
    use_abs_pe: bool = True
    scale: bool = True
    seed: int = 0

    def __post_init__(self):
        self.variant_for_upper = Variant(self.variant_for_upper)
        self.validate()

    def validate(self) -> None:
        for name in ("num_heads", "d_model", "d_h", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if not 0 <= self.num_phsa_layers <= self.num_layers:
            raise ConfigError(
                f"num_phsa_layers must lie in [0, {self.num_layers}], got {self.num_phsa_layers}")
        if self.d_model != self.num_heads * self.d_h:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal num_heads ({self.num_heads}) x d_h ({self.d_h})")

    def layer_variant(self, index: int) -> Variant:
        return Variant.M5 if index < self.num_phsa_layers else self.variant_for_upper

    @property
    def pe_position(self) -> int | None:
        """Index of the layer whose input receives positional encodings."""
        if not self.use_abs_pe or self.num_phsa_layers >= self.num_layers:
            return None
        return self.num_phsa_layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant_for_upper"] = self.variant_for_upper.value
        return d


@dataclass
class EncoderLayer:
    variant: Variant
    norm1_gain: Tensor
    norm1_bias: Tensor
    attn: AttentionHeadParams
    W_O: Tensor
    b_O: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    ffn_W1: Tensor
    ffn_b1: Tensor
    ffn_W2: Tensor
    ffn_b2: Tensor

    _DENSE = ("norm1_gain", "norm1_bias", "W_O", "b_O", "norm2_gain", "norm2_bias",
              "ffn_W1", "ffn_b1", "ffn_W2", "ffn_b2")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"attn.{k}": v for k, v in self.attn.named(self.variant).items()}
        out.update({k: getattr(self, k) for k in self._DENSE})
        return out

    def attention_parameters(self) -> dict[str, Tensor]:
        return self.attn.named(self.variant)


@dataclass
class EncoderParams:
    layers: list[EncoderLayer] = field(default_factory=list)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_parameters().items():
                yield f"layers.{i}.{name}", t


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator | None = None,
                 precision: Precision = Precision.TRAIN) -> EncoderParams:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    dtype = precision.dtype
    layers = []
    for i in range(cfg.num_layers):
        variant = cfg.layer_variant(i)

        def dense(shape):
            return Tensor(glorot(rng, shape, dtype), requires_grad=True)

        def const(value, width):
            return Tensor(np.full((width,), value, dtype=dtype), requires_grad=True)

        attn = init_head(variant, cfg.d_model, cfg.d_h, rng, dtype=dtype, heads=cfg.num_heads)
        layers.append(EncoderLayer(
            variant=variant,
            norm1_gain=const(1.0, cfg.d_model), norm1_bias=const(0.0, cfg.d_model),
            attn=attn,
            W_O=dense((cfg.d_model, cfg.d_model)), b_O=const(0.0, cfg.d_model),
            norm2_gain=const(1.0, cfg.d_model), norm2_bias=const(0.0, cfg.d_model),
            ffn_W1=dense((cfg.d_model, cfg.ffn_dim)), ffn_b1=const(0.0, cfg.ffn_dim),
            ffn_W2=dense((cfg.ffn_dim, cfg.d_model)), ffn_b2=const(0.0, cfg.d_model),
        ))
    return EncoderParams(layers)


def sinusoidal_encoding(T: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Classic fixed encodings: sin on even channels, cos on odd channels."""
    pos = np.arange(T)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    pe = np.zeros((T, d_model))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d_model // 2])
    return pe.astype(dtype)


def _layer_forward(layer: EncoderLayer, x: Tensor, cfg: EncoderConfig, mask, drop: Drop | None):
    h = layer_norm(x, layer.norm1_gain, layer.norm1_bias)
    a, maps = multi_head_forward(layer.variant, h, layer.attn, layer.W_O, layer.b_O,
                                 scale=cfg.scale, mask=mask, drop=drop, return_maps=True)
    x = add(x, a)
    h = layer_norm(x, layer.norm2_gain, layer.norm2_bias)
    f = matmul(swish(add(matmul(h, layer.ffn_W1), layer.ffn_b1)), layer.ffn_W2)
    return add(x, add(f, layer.ffn_b2)), maps


def encoder_forward(
    cfg: EncoderConfig,
    params: EncoderParams,
    X,
    collect_maps: bool = False,
    mask=None,
    drop: Drop | None = None,
):
    """Run the stack on ``X`` of shape (T, d_model) or (B, T, d_model).

    ``mask`` (shape (T,) or (B, T)) marks valid frames.  ``drop`` discards a
    score term in the phonetic layers only.  Returns ``(features, maps)``
    where ``maps`` is a list with one (…, H, T, T) array per layer, or None.
    """
    X = as_tensor(X)
    if X.ndim not in (2, 3) or X.shape[-1] != cfg.d_model:
        raise ShapeError(f"encoder expects (..., T, {cfg.d_model}) input, got {X.shape}")
    if len(params.layers) != cfg.num_layers:
        raise ConfigError(f"config has {cfg.num_layers} layers but params have {len(params.layers)}")
    x = X
    maps = [] if collect_maps else None
    for i, layer in enumerate(params.layers):
        if i == cfg.pe_position:
            x = add(x, sinusoidal_encoding(X.shape[-2], cfg.d_model, X.dtype))
        layer_drop = drop if i < cfg.num_phsa_layers else None
        x, m = _layer_forward(layer, x, cfg, mask, layer_drop)
        if maps is not None:
            maps.append(m.value)
    return x, maps


def term_ablated_forward(cfg: EncoderConfig, params: EncoderParams, X, drop: Drop | str,
                         collect_maps: bool = False, mask=None):
    """Forward pass with one phonetic score term discarded, parameters untouched."""
    if cfg.num_phsa_layers == 0:
        raise ConfigError("term ablation needs at least one phonetic attention layer")
    return encoder_forward(cfg, params, X, collect_maps=collect_maps, mask=mask, drop=Drop(drop))


def attention_parameter_count(variant: Variant, d_model: int, d_h: int, num_heads: int,
                              include_key_bias: bool = False) -> dict[str, int]:
    """Per-field parameter counts of one attention block (output projection included)."""
    variant = Variant(variant)
    sizes = {
        "W_Q": d_model * d_h, "W_K": d_model * d_h, "W_V": d_model * d_h, "W_C": d_model * d_h,
        "b_Q": d_h, "b_K": d_h, "b_V": d_h,
        "c": d_model if variant is Variant.M3 else d_h,
        "alpha_s": 1, "alpha_c": 1,
    }
    names = list(variant.trainable)
    if include_key_bias:
        names.append("b_K")
    counts = {n: sizes[n] * num_heads for n in names}
    counts["W_O"] = d_model * d_model
    counts["b_O"] = d_model
    return counts
