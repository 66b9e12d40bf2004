"""Inspection tools for trained encoders: PAR, attention entropy, PReLU slopes.

PAR (phoneme attention relationship) turns frame-to-frame attention into
class-to-class attention: entry (i, j) is the attention mass that an average
query frame of class i puts on key frames of class j.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import ConfigError, EncoderConfig, EncoderParams
from .task import Classifier, Utterance, batches, make_batch


class MapError(ValueError):
    """Attention maps or labels are malformed."""


@dataclass
class ParMatrix:
    values: np.ndarray
    class_names: list[str]
    support: np.ndarray

    @property
    def supported(self) -> np.ndarray:
        return self.support > 0


def _check_map(a: np.ndarray, labels: np.ndarray, tol: float) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise MapError(f"attention map must be square, got {a.shape}")
    if labels.shape != (a.shape[0],):
        raise MapError(f"{labels.shape[0]} labels for a {a.shape[0]}-frame map")
    if np.abs(a.sum(axis=1) - 1.0).max() > tol:
        raise MapError("attention map rows do not sum to one")


def compute_par(
    maps: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    num_classes: int,
    class_names: Sequence[str] | None = None,
    exclude_silence: bool = False,
    silence: int = 0,
    tol: float = 1e-5,
) -> ParMatrix:
    """Average class-to-class attention over every query frame of every map.

    Rows of classes that never occur as queries stay zero with support 0.
    With ``exclude_silence`` silence queries are skipped and each query's
    mass on silence keys is dropped before renormalising.
    """
    if len(maps) != len(labels):
        raise MapError(f"{len(maps)} maps but {len(labels)} label sequences")
    sums = np.zeros((num_classes, num_classes))
    support = np.zeros(num_classes, dtype=np.int64)
    for a, lab in zip(maps, labels):
        a = np.asarray(a, dtype=np.float64)
        lab = np.asarray(lab)
        _check_map(a, lab, tol)
        onehot = np.zeros((lab.size, num_classes))
        onehot[np.arange(lab.size), lab] = 1.0
        mass = a @ onehot
        if exclude_silence:
            keep = lab != silence
            mass[:, silence] = 0.0
            totals = mass.sum(axis=1, keepdims=True)
            keep &= totals[:, 0] > 0
            mass = np.divide(mass, totals, out=np.zeros_like(mass), where=totals > 0)
            onehot = onehot * keep[:, None]
        sums += onehot.T @ mass
        support += onehot.sum(axis=0).astype(np.int64)
    values = np.divide(sums, support[:, None], out=np.zeros_like(sums), where=support[:, None] > 0)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return ParMatrix(values, names, support)


def par_symmetry_score(par: ParMatrix) -> float:
    """1 - |P - P^T|_1 / (|P|_1 + |P^T|_1) over the supported classes; 1 means symmetric."""
    idx = np.flatnonzero(par.supported)
    P = par.values[np.ix_(idx, idx)]
    total = 2.0 * np.abs(P).sum()
    if total == 0:
        return 1.0
    return float(1.0 - np.abs(P - P.T).sum() / total)


def row_entropy(a: np.ndarray) -> np.ndarray:
    """Natural-log entropy of each row, with 0 ln 0 = 0."""
    a = np.asarray(a, dtype=np.float64)
    logs = np.log(np.where(a > 0, a, 1.0))
    return -(a * logs).sum(axis=-1)


@dataclass
class HeadEntropy:
    layer: int
    head: int
    mean: float
    std: float
    rows: int


@dataclass
class EntropyReport:
    """Row entropies (nats) aggregated per (layer, head) and overall."""

    tag: str
    heads: list[HeadEntropy]
    mean: float
    std_rows: float
    std_heads: float
    max_T: int
    base: str = "e"

    def rows(self) -> list[tuple]:
        out = [(h.layer, h.head, "entropy", h.mean, h.std) for h in self.heads]
        out.append(("all", "all", "entropy_rows", self.mean, self.std_rows))
        out.append(("all", "all", "entropy_heads", self.mean, self.std_heads))
        return out


def attention_entropy(
    maps: Sequence[Sequence[np.ndarray]],
    tag: str = "full",
    layers: Sequence[int] | None = None,
    tol: float = 1e-5,
) -> EntropyReport:
    """``maps[u][l]`` is the (H, T, T) stack of utterance ``u`` at layer ``l``."""
    if not maps:
        raise MapError("no maps given")
    n_layers = len(maps[0])
    layers = list(range(n_layers)) if layers is None else list(layers)
    if not layers:
        raise MapError("no layers selected")
    per_head: dict[tuple[int, int], list[np.ndarray]] = {}
    max_T = 0
    for utt in maps:
        for l in layers:
            stack = np.asarray(utt[l], dtype=np.float64)
            if stack.ndim == 2:
                stack = stack[None]
            if np.abs(stack.sum(axis=-1) - 1.0).max() > tol or stack.min() < -tol:
                raise MapError(f"layer {l} has rows that are not probability vectors")
            max_T = max(max_T, stack.shape[-1])
            for h in range(stack.shape[0]):
                per_head.setdefault((l, h), []).append(row_entropy(stack[h]))
    heads = []
    for (l, h), chunks in sorted(per_head.items()):
        e = np.concatenate(chunks)
        heads.append(HeadEntropy(l, h, float(e.mean()), float(e.std()), int(e.size)))
    everything = np.concatenate([np.concatenate(c) for _, c in sorted(per_head.items())])
    head_means = np.array([h.mean for h in heads])
    return EntropyReport(tag, heads, float(everything.mean()), float(everything.std()),
                         float(head_means.std()), max_T)


@dataclass
class SlopeReport:
    rows: list[tuple[int, int, float, float]] = field(default_factory=list)

    @property
    def alpha_s(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    @property
    def alpha_c(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])


def slope_report(params: EncoderParams | Classifier, cfg: EncoderConfig) -> SlopeReport:
    """Negative PReLU slopes of every phonetic head, one (layer, head) row each."""
    if isinstance(params, Classifier):
        params = params.encoder
    if cfg.num_phsa_layers == 0:
        raise ConfigError("slope report needs at least one phonetic attention layer")
    report = SlopeReport()
    for l in range(cfg.num_phsa_layers):
        attn = params.layers[l].attn
        a_s = attn.alpha_s.value.reshape(-1)
        a_c = attn.alpha_c.value.reshape(-1)
        for h in range(a_s.size):
            report.rows.append((l, h, float(a_s[h]), float(a_c[h])))
    return report


def collect_maps(model: Classifier, data: Sequence[Utterance], drop=None, batch_size: int = 32):
    """Per-utterance attention maps, cropped to each utterance's length.

    Returns ``(maps, labels)`` with ``maps[u][l]`` of shape (H, T_u, T_u).
    """
    maps, labels = [], []
    for chunk in batches(sorted(data, key=lambda u: u.uid), batch_size):
        b = make_batch(chunk, model.dtype)
        _, layer_maps = model.forward(b.features, mask=b.mask, collect_maps=True, drop=drop)
        for i, (u, T) in enumerate(zip(chunk, b.lengths)):
            maps.append([np.asarray(m[i, :, :T, :T], dtype=np.float64) for m in layer_maps])
            labels.append(u.labels)
    return maps, labels


def max_within_map_std(maps: Sequence[Sequence[np.ndarray]], layers: Sequence[int] | None = None) -> float:
    """Largest across-row std of row entropy inside any single (utterance, layer, head) map."""
    worst = 0.0
    for utt in maps:
        for l in (range(len(utt)) if layers is None else layers):
            stack = np.asarray(utt[l], dtype=np.float64)
            worst = max(worst, float(row_entropy(stack).std(axis=-1).max()))
    return worst


def entropy_le_log_t(report: EntropyReport) -> bool:
    return 0.0 <= report.mean <= math.log(max(report.max_T, 1)) + 1e-12
