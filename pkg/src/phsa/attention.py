"""Attention score variants M1-M5 and single/multi-head attention.

Shapes follow ``numpy.matmul``: a single head sees ``X`` as (T, d_in) and
weights as (d_in, d_h).  The encoder stacks heads along a leading axis
(weights (H, d_in, d_h), inputs (B, 1, T, d_in)) and reuses the same code.

Variants::

    M1  (XW_Q)(XW_K)^T
    M2  (XW_Q)(XW_K)^T + (XW_K b_Q^T)^T                  vanilla attention
    M3  (XW_Q)(XW_K)^T + (X c^T)^T
    M4  (XW_Q)(XW_K)^T + (swish(XW_C) c^T)^T
    M5  prelu_s((XW_Q)(XW_K)^T) + prelu_c(swish(XW_C) c^T)^T   phonetic attention

The second term of every variant depends on the key frame only, so it is a
row vector that is broadcast over the query rows.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace
from typing import Callable, Sequence

import numpy as np

from .numeric import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    matmul,
    permute,
    prelu,
    reshape,
    softmax_rows,
    stack,
    swish,
    transpose,
)


class Variant(str, enum.Enum):
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"
    M4 = "M4"
    M5 = "M5"

    @property
    def trainable(self) -> tuple[str, ...]:
        return _TRAINABLE[self]

    @property
    def has_content(self) -> bool:
        return self is not Variant.M1


VariantId = Variant

_ALWAYS = ("W_V", "b_V")
_TRAINABLE = {
    Variant.M1: ("W_Q", "W_K") + _ALWAYS,
    Variant.M2: ("W_Q", "W_K", "b_Q") + _ALWAYS,
    Variant.M3: ("W_Q", "W_K", "c") + _ALWAYS,
    Variant.M4: ("W_Q", "W_K", "W_C", "c") + _ALWAYS,
    Variant.M5: ("W_Q", "W_K", "W_C", "c", "alpha_s", "alpha_c") + _ALWAYS,
}


class Drop(str, enum.Enum):
    """Which term of the score to discard (post-training ablation)."""

    SIMILARITY = "similarity"
    CONTENT = "content"


@dataclass
class AttentionHeadParams:
    """Every trainable symbol of one head (or of H stacked heads).

    ``c`` has the width of ``X`` for M3 and the head width for M4/M5.
    ``b_K`` exists only to reproduce the four-term product with biases.
    """

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    b_Q: Tensor
    b_K: Tensor
    b_V: Tensor
    W_C: Tensor
    c: Tensor
    alpha_s: Tensor
    alpha_c: Tensor

    @property
    def d_h(self) -> int:
        return self.W_Q.shape[-1]

    def named(self, variant: Variant | None = None) -> dict[str, Tensor]:
        names = variant.trainable if variant is not None else [f.name for f in fields(self)]
        return {n: getattr(self, n) for n in names}

    def with_values(self, **values) -> "AttentionHeadParams":
        """Copy with some fields replaced (arrays are wrapped into tensors)."""
        return replace(self, **{k: as_tensor(v) for k, v in values.items()})


def glorot(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_head(
    variant: Variant,
    d_in: int,
    d_h: int,
    rng: np.random.Generator,
    dtype=np.float64,
    heads: int | None = None,
) -> AttentionHeadParams:
    """Fresh parameters; ``heads`` adds a leading stacking axis.

    Weights are Glorot-uniform, biases and ``c`` start at zero, PReLU
    slopes start at one.
    """
    variant = Variant(variant)
    lead = () if heads is None else (heads,)
    c_width = d_in if variant is Variant.M3 else d_h

    def w():
        return Tensor(glorot(rng, lead + (d_in, d_h), dtype))

    def zeros(width):
        return Tensor(np.zeros(lead + (1, width), dtype=dtype))

    def ones():
        return Tensor(np.ones(lead + (1, 1), dtype=dtype))

    params = AttentionHeadParams(
        W_Q=w(), W_K=w(), W_V=w(),
        b_Q=zeros(d_h), b_K=zeros(d_h), b_V=zeros(d_h),
        W_C=w(), c=zeros(c_width),
        alpha_s=ones(), alpha_c=ones(),
    )
    for name in variant.trainable:
        getattr(params, name).requires_grad = True
    return params


def _check_input(X: Tensor, p: AttentionHeadParams) -> None:
    if X.ndim < 2 or X.shape[-1] != p.W_Q.shape[-2]:
        raise ShapeError(f"input {X.shape} does not match projection {p.W_Q.shape}")


def similarity_term(variant: Variant, X, p: AttentionHeadParams) -> Tensor:
    """Query-key correlation (XW_Q)(XW_K)^T; PReLU-gated for M5."""
    X = as_tensor(X)
    _check_input(X, p)
    sim = matmul(matmul(X, p.W_Q), transpose(matmul(X, p.W_K)))
    if Variant(variant) is Variant.M5:
        sim = prelu(sim, p.alpha_s)
    return sim


def content_term(
    variant: Variant,
    X,
    p: AttentionHeadParams,
    activation: Callable[[Tensor], Tensor] = swish,
) -> Tensor:
    """Key-only offset as a row vector of shape (..., 1, T).

    ``activation`` replaces the Swish of M4/M5; it exists so the M4 -> M3
    reduction can be checked with an identity map.
    """
    variant = Variant(variant)
    X = as_tensor(X)
    _check_input(X, p)
    if variant is Variant.M1:
        raise ValueError("M1 has no content term")
    if variant is Variant.M2:
        column = matmul(matmul(X, p.W_K), transpose(p.b_Q))
    elif variant is Variant.M3:
        if p.c.shape[-1] != X.shape[-1]:
            raise ShapeError(f"M3 needs c of width {X.shape[-1]}, got {p.c.shape}")
        column = matmul(X, transpose(p.c))
    else:
        column = matmul(activation(matmul(X, p.W_C)), transpose(p.c))
        if variant is Variant.M5:
            column = prelu(column, p.alpha_c)
    return transpose(column)


def score(
    variant: Variant,
    X,
    p: AttentionHeadParams,
    drop: Drop | None = None,
    activation: Callable[[Tensor], Tensor] = swish,
) -> Tensor:
    """Pre-softmax score map (..., T, T) of the given variant."""
    variant = Variant(variant)
    X = as_tensor(X)
    if drop is not None:
        drop = Drop(drop)
        if not variant.has_content:
            raise ValueError(f"{variant.value} has no content term to ablate")
    if drop is Drop.SIMILARITY:
        row = content_term(variant, X, p, activation)
        T = X.shape[-2]
        return add(row, np.zeros(row.shape[:-2] + (T, T), dtype=row.dtype))
    sim = similarity_term(variant, X, p)
    if variant is Variant.M1 or drop is Drop.CONTENT:
        return sim
    return add(sim, content_term(variant, X, p, activation))


def full_dot_product_with_biases(X, p: AttentionHeadParams) -> Tensor:
    """(XW_Q + b_Q)(XW_K + b_K)^T computed literally, all four terms included."""
    X = as_tensor(X)
    _check_input(X, p)
    return matmul(add(matmul(X, p.W_Q), p.b_Q), transpose(add(matmul(X, p.W_K), p.b_K)))


def attention_head_forward(
    variant: Variant,
    X,
    p: AttentionHeadParams,
    scale: bool = True,
    mask=None,
    drop: Drop | None = None,
) -> tuple[Tensor, Tensor]:
    """Return (output, attention map) for one head or a stack of heads.

    ``scale`` divides the whole variant score by sqrt(d_h) before the
    softmax.  ``mask`` marks valid key frames (True = keep).
    """
    X = as_tensor(X)
    s = score(variant, X, p, drop=drop)
    if scale:
        s = s / math.sqrt(p.d_h)
    attn = softmax_rows(s, mask)
    values = add(matmul(X, p.W_V), p.b_V)
    return matmul(attn, values), attn


def stack_heads(heads: Sequence[AttentionHeadParams]) -> AttentionHeadParams:
    """Stack per-head parameters along a new leading axis (differentiable)."""
    if not heads:
        raise ShapeError("need at least one head")
    return AttentionHeadParams(**{
        f.name: stack([getattr(h, f.name) for h in heads], axis=0) for f in fields(AttentionHeadParams)
    })


def merge_heads(per_head: Tensor) -> Tensor:
    """(..., H, T, d_h) -> (..., T, H*d_h)."""
    nd = per_head.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    moved = permute(per_head, axes)
    return reshape(moved, moved.shape[:-2] + (moved.shape[-2] * moved.shape[-1],))


def multi_head_forward(
    variant: Variant,
    X,
    heads: AttentionHeadParams | Sequence[AttentionHeadParams],
    W_O,
    b_O,
    scale: bool = True,
    mask=None,
    drop: Drop | None = None,
    return_maps: bool = False,
):
    """Concatenate head outputs and project with ``W_O``, ``b_O``.

    ``heads`` is a list of single-head parameters or an already stacked set.
    With ``return_maps`` the attention maps (..., H, T, T) come back as well.
    """
    X = as_tensor(X)
    stacked = heads if isinstance(heads, AttentionHeadParams) else stack_heads(list(heads))
    if stacked.W_Q.ndim != 3:
        raise ShapeError(f"stacked projections must be (H, d_in, d_h), got {stacked.W_Q.shape}")
    n_heads, _, d_h = stacked.W_Q.shape
    W_O = as_tensor(W_O)
    if W_O.shape[-2] != n_heads * d_h:
        raise ShapeError(f"W_O {W_O.shape} does not take {n_heads} heads of width {d_h}")
    Xh = reshape(X, X.shape[:-2] + (1,) + X.shape[-2:])
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = mask.reshape(mask.shape[:-1] + (1, 1, mask.shape[-1]))
    out, maps = attention_head_forward(variant, Xh, stacked, scale=scale, mask=mask, drop=drop)
    y = add(matmul(merge_heads(out), W_O), b_O)
    return (y, maps) if return_maps else y
