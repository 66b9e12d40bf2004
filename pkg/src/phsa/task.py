"""Synthetic frame-level phoneme classification.

Each utterance is a run of phoneme segments.  A frame is its class mean plus
a per-utterance speaker offset plus per-frame noise.  Classes inside a
confusable group share part of their mean vector, so they are the ones a
classifier mixes up.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .attention import Variant, glorot
from .encoder import ConfigError, EncoderConfig, EncoderParams, encoder_forward, init_encoder
from .numeric import Precision, Tape, Tensor, add, cross_entropy, matmul

log = logging.getLogger(__name__)

DEFAULT_CLASS_NAMES = ("sil", "s", "z", "sh", "p", "b", "t", "d", "aa", "iy", "m", "n")
DEFAULT_GROUPS = ((1, 2, 3), (4, 5), (6, 7), (10, 11))


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class PhonemeInventory:
    num_classes: int = 12
    confusable_groups: tuple[tuple[int, ...], ...] = DEFAULT_GROUPS
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    mean_scale: float = 0.4
    shared_fraction: float = 0.5
    seed: int = 1234

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.class_names) != self.num_classes:
            raise ValueError(f"{len(self.class_names)} names for {self.num_classes} classes")
        if len(set(self.class_names)) != self.num_classes:
            raise ValueError("class names must be unique")
        seen: set[int] = set()
        for group in self.confusable_groups:
            for cid in group:
                if not 0 < cid < self.num_classes:
                    raise ValueError(f"group member {cid} is silence or out of range")
                if cid in seen:
                    raise ValueError(f"class {cid} appears in more than one group")
                seen.add(cid)
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError("shared_fraction must lie in [0, 1]")

    def group_of(self, cid: int) -> int | None:
        for g, members in enumerate(self.confusable_groups):
            if cid in members:
                return g
        return None

    def class_means(self, d_in: int) -> np.ndarray:
        """(C, d_in) means; group members agree on the leading shared coordinates."""
        rng = np.random.default_rng(self.seed)
        means = rng.normal(0.0, self.mean_scale, size=(self.num_classes, d_in))
        n_shared = int(round(self.shared_fraction * d_in))
        for group in self.confusable_groups:
            means[list(group), :n_shared] = means[group[0], :n_shared]
        return means

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhonemeInventory":
        d = dict(d)
        d["confusable_groups"] = tuple(tuple(g) for g in d.get("confusable_groups", DEFAULT_GROUPS))
        d["class_names"] = tuple(d.get("class_names", DEFAULT_CLASS_NAMES))
        return cls(**d)


@dataclass
class Utterance:
    uid: int
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be (T>=1, d_in), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} frames")

    @property
    def T(self) -> int:
        return self.features.shape[0]


def generate_dataset(
    inv: PhonemeInventory,
    n_utts: int,
    t_range: tuple[int, int],
    d_in: int,
    seed: int,
    noise_scale: float = 0.3,
    speaker_scale: float = 0.5,
    first_uid: int = 0,
) -> list[Utterance]:
    t_min, t_max = t_range
    if t_min < 4 or t_max < t_min:
        raise ValueError(f"invalid length range {t_range}; need 4 <= min <= max")
    if d_in < 8:
        raise ValueError(f"d_in must be >= 8, got {d_in}")
    if n_utts < 1:
        raise ValueError("n_utts must be positive")
    means = inv.class_means(d_in)
    rng = np.random.default_rng(seed)
    data = []
    for k in range(n_utts):
        T = int(rng.integers(t_min, t_max + 1))
        labels = []
        current = 0
        while len(labels) < T:
            labels.extend([current] * int(rng.integers(3, 11)))
            nxt = int(rng.integers(0, inv.num_classes - 1))
            current = nxt if nxt < current else nxt + 1
        labels = np.asarray(labels[:T], dtype=np.int64)
        offset = rng.normal(0.0, speaker_scale, size=d_in)
        noise = rng.normal(0.0, noise_scale, size=(T, d_in))
        data.append(Utterance(first_uid + k, means[labels] + offset + noise, labels))
    return data


# --------------------------------------------------------------------------
# classifier
# --------------------------------------------------------------------------

@dataclass
class Classifier:
    """Input projection -> encoder -> per-frame linear readout."""

    enc_cfg: EncoderConfig
    in_W: Tensor
    in_b: Tensor
    encoder: EncoderParams
    out_W: Tensor
    out_b: Tensor

    @property
    def dtype(self):
        return self.in_W.dtype

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"input.W": self.in_W, "input.b": self.in_b}
        out.update({f"encoder.{k}": v for k, v in self.encoder.named_parameters()})
        out["readout.W"] = self.out_W
        out["readout.b"] = self.out_b
        return out

    def parameter_count(self) -> int:
        return sum(t.value.size for t in self.named_parameters().values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.named_parameters().items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(values) != set(named):
            missing = sorted(set(named) - set(values))
            extra = sorted(set(values) - set(named))
            raise ConfigError(f"parameter names differ; missing={missing} extra={extra}")
        for k, t in named.items():
            if values[k].shape != t.shape:
                raise ConfigError(f"{k}: expected shape {t.shape}, got {values[k].shape}")
            t.value = np.array(values[k], dtype=t.dtype)

    def forward(self, X, mask=None, collect_maps: bool = False, drop=None):
        h = add(matmul(X, self.in_W), self.in_b)
        feats, maps = encoder_forward(self.enc_cfg, self.encoder, h, collect_maps=collect_maps,
                                      mask=mask, drop=drop)
        return add(matmul(feats, self.out_W), self.out_b), maps


def init_classifier(enc_cfg: EncoderConfig, d_in: int, num_classes: int,
                    precision: Precision = Precision.TRAIN) -> Classifier:
    rng = np.random.default_rng(enc_cfg.seed)
    dtype = precision.dtype
    in_W = Tensor(glorot(rng, (d_in, enc_cfg.d_model), dtype), requires_grad=True)
    in_b = Tensor(np.zeros(enc_cfg.d_model, dtype=dtype), requires_grad=True)
    encoder = init_encoder(enc_cfg, rng, precision)
    out_W = Tensor(glorot(rng, (enc_cfg.d_model, num_classes), dtype), requires_grad=True)
    out_b = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)
    return Classifier(enc_cfg, in_W, in_b, encoder, out_W, out_b)


def variant_encoder_config(variant: Variant | str, base: EncoderConfig | None = None) -> EncoderConfig:
    """Every layer runs ``variant``; M5 therefore means a stack without positional encodings."""
    base = base or EncoderConfig()
    variant = Variant(variant)
    if variant is Variant.M5:
        return replace(base, num_phsa_layers=base.num_layers)
    return replace(base, num_phsa_layers=0, variant_for_upper=variant)


@dataclass
class Batch:
    uids: list[int]
    features: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    lengths: list[int]


def make_batch(utts: Sequence[Utterance], dtype=np.float32) -> Batch:
    utts = sorted(utts, key=lambda u: u.uid)
    T = max(u.T for u in utts)
    d = utts[0].features.shape[1]
    feats = np.zeros((len(utts), T, d), dtype=dtype)
    labels = np.zeros((len(utts), T), dtype=np.int64)
    mask = np.zeros((len(utts), T), dtype=bool)
    for i, u in enumerate(utts):
        feats[i, : u.T] = u.features
        labels[i, : u.T] = u.labels
        mask[i, : u.T] = True
    return Batch([u.uid for u in utts], feats, labels, mask, [u.T for u in utts])


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1.56e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    epochs: int = 15
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _decays(name: str) -> bool:
    # Weight matrices only; biases, norms, c and PReLU slopes are left alone.
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("W") or leaf.startswith("ffn_W")


@dataclass
class Adam:
    """Adam moments with bias correction and decoupled weight decay."""

    cfg: TrainConfig
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        corr1 = 1.0 - c.beta1 ** t
        corr2 = 1.0 - c.beta2 ** t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.value)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            update = c.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + c.eps)
            if _decays(name):
                update = update + c.learning_rate * c.weight_decay * p.value
            p.value = (p.value - update).astype(p.dtype)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    confusion: np.ndarray
    num_frames: int


def batches(data: Sequence[Utterance], batch_size: int) -> list[list[Utterance]]:
    return [list(data[i: i + batch_size]) for i in range(0, len(data), batch_size)]


def evaluate(model: Classifier, data: Sequence[Utterance], batch_size: int = 32, drop=None) -> EvalResult:
    """Frame accuracy, mean frame loss and confusion matrix (rows = true class)."""
    if not data:
        raise ValueError("evaluate needs at least one utterance")
    C = model.out_W.shape[-1]
    confusion = np.zeros((C, C), dtype=np.int64)
    loss_sum = 0.0
    frames = 0
    for chunk in batches(sorted(data, key=lambda u: u.uid), batch_size):
        b = make_batch(chunk, model.dtype)
        logits, _ = model.forward(b.features, mask=b.mask, drop=drop)
        n = int(b.mask.sum())
        loss_sum += cross_entropy(logits, b.labels, b.mask).item() * n
        frames += n
        pred = logits.value.argmax(axis=-1)
        np.add.at(confusion, (b.labels[b.mask], pred[b.mask]), 1)
    return EvalResult(float(np.trace(confusion) / frames), loss_sum / frames, confusion, frames)


def confusion_from_predictions(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (np.asarray(labels), np.asarray(preds)), 1)
    return confusion


def group_confusion_ratio(confusion: np.ndarray, inv: PhonemeInventory) -> float:
    """Mean row-normalized confusion per within-group pair over the same for cross-group pairs."""
    rates = confusion / np.maximum(confusion.sum(axis=1, keepdims=True), 1)
    within, across = [], []
    for i in range(inv.num_classes):
        for j in range(inv.num_classes):
            if i == j:
                continue
            gi = inv.group_of(i)
            (within if gi is not None and gi == inv.group_of(j) else across).append(rates[i, j])
    w, a = float(np.mean(within)), float(np.mean(across))
    return math.inf if a == 0 else w / a


def train_step(model: Classifier, batch: Batch, opt: Adam) -> float:
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        logits, _ = model.forward(batch.features, mask=batch.mask)
        loss = cross_entropy(logits, batch.labels, batch.mask)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss {value} at step {opt.step_count + 1} (utterances {batch.uids})")
    tape.backward(loss)
    opt.step(params, {k: p.grad for k, p in params.items() if p.grad is not None})
    return value


def train(
    cfg: TrainConfig,
    enc_cfg: EncoderConfig,
    data: Sequence[Utterance],
    num_classes: int,
    model: Classifier | None = None,
    on_epoch: Callable[[int, Classifier, list[EpochRecord], Adam], None] | None = None,
) -> tuple[Classifier, list[EpochRecord]]:
    """Minimise mean frame cross-entropy; history[0] is the untrained model."""
    if not data:
        raise ValueError("training data is empty")
    d_in = data[0].features.shape[1]
    model = model or init_classifier(enc_cfg, d_in, num_classes)
    opt = Adam(cfg)
    rng = np.random.default_rng(cfg.seed)
    ordered = sorted(data, key=lambda u: u.uid)
    ev = evaluate(model, ordered)
    history = [EpochRecord(0, ev.loss, ev.accuracy)]
    if not math.isfinite(ev.loss):
        raise DivergenceError(f"initial loss is not finite: {ev.loss}")
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(ordered))
        for chunk in batches([ordered[i] for i in order], cfg.batch_size):
            train_step(model, make_batch(chunk, model.dtype), opt)
        ev = evaluate(model, ordered)
        if not math.isfinite(ev.loss):
            raise DivergenceError(f"non-finite training loss after epoch {epoch}")
        history.append(EpochRecord(epoch, ev.loss, ev.accuracy))
        log.info("epoch %d loss %.4f acc %.4f", epoch, ev.loss, ev.accuracy)
        if on_epoch is not None:
            on_epoch(epoch, model, history, opt)
    return model, history


@dataclass
class SweepResult:
    variant: Variant
    seed: int
    initial_loss: float
    final_loss: float
    dev_accuracy: float
    confusion: np.ndarray


def variant_sweep(
    train_set: Sequence[Utterance],
    dev_set: Sequence[Utterance],
    num_classes: int,
    variants: Sequence[Variant | str] = tuple(Variant),
    seeds: Sequence[int] = (0, 1, 2),
    train_cfg: TrainConfig | None = None,
    base: EncoderConfig | None = None,
) -> list[SweepResult]:
    """Train one classifier per (variant, seed) with every layer running that variant."""
    train_cfg = train_cfg or TrainConfig()
    base = base or EncoderConfig()
    results = []
    for v in variants:
        for seed in seeds:
            enc = variant_encoder_config(v, replace(base, seed=seed))
            model, history = train(replace(train_cfg, seed=seed), enc, train_set, num_classes)
            ev = evaluate(model, dev_set)
            results.append(SweepResult(Variant(v), seed, history[0].loss, history[-1].loss,
                                       ev.accuracy, ev.confusion))
    return results
