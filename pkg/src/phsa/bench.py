"""Per-layer timing and parameter counts: vanilla attention + absolute PE vs phonetic attention."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .attention import Variant
from .encoder import (
    EncoderConfig,
    EncoderLayer,
    _layer_forward,
    attention_parameter_count,
    init_encoder,
    sinusoidal_encoding,
)
from .numeric import Precision, Tape, Tensor, add, sum_all

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


@dataclass
class BenchRow:
    layer: str
    T: int
    mode: str
    median_ms: float
    p95_ms: float
    ops: int
    params: int

    def as_tuple(self) -> tuple:
        return (self.layer, self.T, self.mode, round(self.median_ms, 3), round(self.p95_ms, 3),
                self.ops, self.params)


BENCH_COLUMNS = ("layer", "T", "mode", "median_ms", "p95_ms", "ops", "params")


def layer_parameter_count(layer: EncoderLayer) -> int:
    return sum(t.value.size for t in layer.named_parameters().values())


def parity_table(cfg: EncoderConfig) -> dict[str, dict[str, int]]:
    """Attention-block counts for conventional SA (with b_K), M2 and phonetic attention."""
    args = (cfg.d_model, cfg.d_h, cfg.num_heads)
    return {
        "sa_conventional": attention_parameter_count(Variant.M2, *args, include_key_bias=True),
        "sa_m2": attention_parameter_count(Variant.M2, *args),
        "phsa": attention_parameter_count(Variant.M5, *args),
    }


def _one_layer(cfg: EncoderConfig, variant: Variant, seed: int) -> EncoderLayer:
    single = replace(cfg, num_layers=1, num_phsa_layers=1 if variant is Variant.M5 else 0,
                     variant_for_upper=Variant.M2, seed=seed)
    return init_encoder(single, np.random.default_rng(seed), Precision.TRAIN).layers[0]


def _run(layer: EncoderLayer, cfg: EncoderConfig, X: np.ndarray, with_pe: bool, backward: bool) -> int:
    x = Tensor(X)
    if backward:
        x.requires_grad = True
        with Tape() as tape:
            h = add(x, sinusoidal_encoding(X.shape[0], cfg.d_model, X.dtype)) if with_pe else x
            out, _ = _layer_forward(layer, h, cfg, None, None)
            loss = sum_all(out)
        tape.backward(loss)
        for t in layer.named_parameters().values():
            t.grad = None
        return len(tape.nodes)
    h = add(x, sinusoidal_encoding(X.shape[0], cfg.d_model, X.dtype)) if with_pe else x
    _layer_forward(layer, h, cfg, None, None)
    return 0


def run_bench(cfg: EncoderConfig | None = None, lengths=(64, 256, 1024), iters: int = 5,
              warmup: int = 1, seed: int = 0, threads: int | None = 1) -> list[BenchRow]:
    cfg = cfg or EncoderConfig()
    if threads is not None and threadpool_limits is not None:
        with threadpool_limits(limits=threads):
            return _bench(cfg, lengths, iters, warmup, seed)
    return _bench(cfg, lengths, iters, warmup, seed)


def _bench(cfg, lengths, iters, warmup, seed) -> list[BenchRow]:
    rows = []
    rng = np.random.default_rng(seed)
    layers = {
        "sa+abs_pe": (_one_layer(cfg, Variant.M2, seed), True),
        "phsa": (_one_layer(cfg, Variant.M5, seed), False),
    }
    for T in lengths:
        X = rng.normal(size=(T, cfg.d_model)).astype(np.float32)
        for name, (layer, with_pe) in layers.items():
            for mode, backward in (("forward", False), ("forward+backward", True)):
                times, ops = [], 0
                for i in range(warmup + iters):
                    start = time.perf_counter()
                    ops = _run(layer, cfg, X, with_pe, backward)
                    if i >= warmup:
                        times.append((time.perf_counter() - start) * 1e3)
                rows.append(BenchRow(name, T, mode, float(np.median(times)),
                                     float(np.percentile(times, 95)), ops, layer_parameter_count(layer)))
    return rows
