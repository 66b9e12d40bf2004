"""Property checks run by ``phsa verify``, all in float64.

Each check returns a ``CheckResult`` holding the worst deviation it saw and
the tolerance it was held to.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .analysis import compute_par, row_entropy
from .attention import (
    AttentionHeadParams,
    Variant,
    attention_head_forward,
    content_term,
    full_dot_product_with_biases,
    score,
    similarity_term,
)
from .encoder import EncoderConfig
from .numeric import (
    Precision,
    Tensor,
    cross_entropy,
    grad_check,
    layer_norm,
    matmul,
    mul,
    permute,
    prelu,
    reshape,
    softmax_rows,
    stack,
    sum_all,
    swish,
    transpose,
)
from .task import Classifier, init_classifier


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    seconds: float = 0.0
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tol:.0e}, {self.seconds:.2f}s){extra}"


@dataclass
class VerifyReport:
    results: list[CheckResult] = field(default_factory=list)
    max_grad_error: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


def random_head(rng: np.random.Generator, d_in: int, d_h: int, c_width: int | None = None,
                alpha_range: tuple[float, float] = (0.3, 2.0)) -> AttentionHeadParams:
    """All fields drawn at random (biases and slopes included)."""
    def w(*shape):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(shape[0] if len(shape) > 1 else 1), size=shape))

    return AttentionHeadParams(
        W_Q=w(d_in, d_h), W_K=w(d_in, d_h), W_V=w(d_in, d_h),
        b_Q=Tensor(rng.normal(size=(1, d_h))), b_K=Tensor(rng.normal(size=(1, d_h))),
        b_V=Tensor(rng.normal(size=(1, d_h))),
        W_C=w(d_in, d_h), c=Tensor(rng.normal(size=(1, c_width or d_h))),
        alpha_s=Tensor(rng.uniform(*alpha_range, size=(1, 1))),
        alpha_c=Tensor(rng.uniform(*alpha_range, size=(1, 1))),
    )


def _draw_shapes(rng):
    return int(rng.integers(1, 13)), int(rng.integers(1, 9))


def _timed(name: str, tol: float, fn: Callable[[], tuple[float, str] | float]) -> CheckResult:
    start = time.perf_counter()
    out = fn()
    value, detail = out if isinstance(out, tuple) else (out, "")
    return CheckResult(name, float(value), tol, time.perf_counter() - start, detail)


def bias_removal_gap(draws: int = 100, seed: int = 0) -> float:
    """max |softmax(full four-term product) - softmax(M2)| over random draws."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        T, d = _draw_shapes(rng)
        p = random_head(rng, d, d)
        X = rng.normal(size=(T, d))
        a = softmax_rows(full_dot_product_with_biases(X, p)).value
        b = softmax_rows(score(Variant.M2, X, p)).value
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def reduction_chain_gap(draws: int = 100, seed: int = 1) -> float:
    """Worst gap over the M5 -> M4 -> M3 -> M2 -> M1 parameter substitutions."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        T, d = _draw_shapes(rng)
        X = rng.normal(size=(T, d))
        p = random_head(rng, d, d)
        unit = p.with_values(alpha_s=np.ones((1, 1)), alpha_c=np.ones((1, 1)))
        gaps = [score(Variant.M5, X, unit).value - score(Variant.M4, X, unit).value]
        m3 = p.with_values(c=p.c.value @ p.W_C.value.T)
        gaps.append(score(Variant.M4, X, p, activation=lambda t: t).value - score(Variant.M3, X, m3).value)
        m3_from_bias = p.with_values(c=p.b_Q.value @ p.W_K.value.T)
        gaps.append(score(Variant.M3, X, m3_from_bias).value - score(Variant.M2, X, p).value)
        no_bias = p.with_values(b_Q=np.zeros_like(p.b_Q.value))
        gaps.append(score(Variant.M2, X, no_bias).value - score(Variant.M1, X, p).value)
        worst = max(worst, max(float(np.abs(g).max()) for g in gaps))
    return worst


def row_constancy_gap(draws: int = 50, seed: int = 2) -> float:
    """Rows of (score - similarity part) must be identical for M2..M5."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        T, d = _draw_shapes(rng)
        X = rng.normal(size=(T, d))
        for v in (Variant.M2, Variant.M3, Variant.M4, Variant.M5):
            p = random_head(rng, d, d, c_width=d)
            offset = score(v, X, p).value - similarity_term(v, X, p).value
            worst = max(worst, float(np.abs(offset - offset[:1]).max()))
            worst = max(worst, float(np.abs(offset[0] - content_term(v, X, p).value[0]).max()))
    return worst


def permutation_gap(draws: int = 50, seed: int = 3) -> float:
    """Permuting frames must permute every variant's attention map on both axes."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        T, d = _draw_shapes(rng)
        X = rng.normal(size=(T, d))
        perm = rng.permutation(T)
        for v in Variant:
            p = random_head(rng, d, d, c_width=d)
            _, a = attention_head_forward(v, X, p)
            _, b = attention_head_forward(v, X[perm], p)
            worst = max(worst, float(np.abs(a.value[np.ix_(perm, perm)] - b.value).max()))
    return worst


def primitive_grad_error(seed: int = 4) -> float:
    """Finite-difference check of every differentiable primitive.

    Each output is contracted with fixed random weights so that no
    gradient is trivially zero (a plain sum of softmax rows would be).
    """
    rng = np.random.default_rng(seed)

    def leaf(*shape, away_from_zero=False):
        v = rng.normal(size=shape)
        if away_from_zero:
            v = np.sign(v) * (0.2 + np.abs(v))
        return Tensor(v, requires_grad=True)

    a, b = leaf(3, 4), leaf(4, 5)
    x = leaf(2, 3, 5, away_from_zero=True)
    alpha = leaf(1, 1)
    g, beta = leaf(5), leaf(5)
    s = leaf(4, 6)
    mask = np.array([True, True, False, True, True, False])
    cases = [
        ([a, b], lambda: matmul(a, b)),
        ([a, b], lambda: matmul(a, b) * 3.0 - 1.0),
        ([s], lambda: softmax_rows(s)),
        ([s], lambda: softmax_rows(s, mask)),
        ([x], lambda: swish(x)),
        ([x, alpha], lambda: prelu(x, alpha)),
        ([x, g, beta], lambda: layer_norm(x, g, beta)),
        ([x], lambda: permute(x, (1, 2, 0))),
        ([x], lambda: reshape(transpose(x), (2, 15))),
        ([a], lambda: stack([a, a * 2.0], axis=1)),
    ]
    worst = 0.0
    for params, fn in cases:
        weights = Tensor(rng.normal(size=fn().shape))
        worst = max(worst, grad_check(lambda: sum_all(mul(fn(), weights)), params))
    labels = np.array([[0, 2, 1, 4], [3, 3, 0, 1]])
    logits = leaf(2, 4, 5)
    w = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=float)
    worst = max(worst, grad_check(lambda: cross_entropy(logits, labels, w), [logits]))
    return worst


def param_class(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if ".attn." in name:
        return leaf
    if leaf.startswith("ffn_"):
        return "ffn"
    if leaf.startswith("norm"):
        return "norm"
    if leaf in ("W_O", "b_O"):
        return "out_proj"
    return name.split(".", 1)[0]


def grad_check_model(
    layers: int = 2,
    heads: int = 2,
    d_h: int = 8,
    T: int = 12,
    d_in: int = 8,
    num_classes: int = 5,
    max_entries: int = 6,
    seed: int = 5,
) -> dict[str, float]:
    """Relative gradient error per parameter class on a tiny hybrid classifier.

    The lower layer runs M5 and the upper layer M2, so every class from
    W_Q to alpha_c is trainable somewhere.  A second, shorter utterance in
    the batch exercises the padding mask.
    """
    cfg = EncoderConfig(num_layers=layers, num_heads=heads, d_model=heads * d_h, d_h=d_h,
                        ffn_dim=2 * heads * d_h, num_phsa_layers=max(1, layers // 2),
                        variant_for_upper=Variant.M2, seed=seed)
    model = init_classifier(cfg, d_in, num_classes, Precision.CHECK)
    perturb_for_check(model, seed)
    rng = np.random.default_rng(seed + 1)
    X = rng.normal(size=(2, T, d_in))
    mask = np.ones((2, T), dtype=bool)
    mask[1, T - 3:] = False
    labels = rng.integers(0, num_classes, size=(2, T))

    def loss():
        logits, _ = model.forward(X, mask=mask)
        return cross_entropy(logits, labels, mask)

    groups: dict[str, list[Tensor]] = {}
    for name, t in model.named_parameters().items():
        groups.setdefault(param_class(name), []).append(t)
    check_rng = np.random.default_rng(seed + 2)
    return {cls: grad_check(loss, ts, epsilon=1e-6, max_entries=max_entries, rng=check_rng)
            for cls, ts in sorted(groups.items())}


def perturb_for_check(model: Classifier, seed: int) -> None:
    """Move every parameter off its initial value so no gradient is trivially zero."""
    rng = np.random.default_rng(seed)
    for name, t in model.named_parameters().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("alpha_s", "alpha_c"):
            t.value = rng.uniform(0.3, 2.0, size=t.shape)
        elif leaf.startswith("norm") and "gain" in leaf:
            t.value = 1.0 + 0.2 * rng.normal(size=t.shape)
        else:
            t.value = t.value + 0.3 * rng.normal(size=t.shape)


def brute_force_par(maps, labels, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    sums = [[0.0] * num_classes for _ in range(num_classes)]
    support = [0] * num_classes
    for a, lab in zip(maps, labels):
        T = len(lab)
        for q in range(T):
            support[lab[q]] += 1
            for k in range(T):
                sums[lab[q]][lab[k]] += float(a[q][k])
    par = np.zeros((num_classes, num_classes))
    for i in range(num_classes):
        for j in range(num_classes):
            if support[i]:
                par[i, j] = sums[i][j] / support[i]
    return par, np.array(support)


def random_par_instance(rng: np.random.Generator, max_T: int = 8, max_C: int = 5, max_utts: int = 3):
    C = int(rng.integers(1, max_C + 1))
    maps, labels = [], []
    for _ in range(int(rng.integers(1, max_utts + 1))):
        T = int(rng.integers(1, max_T + 1))
        raw = rng.random((T, T)) ** 3
        maps.append(raw / raw.sum(axis=1, keepdims=True))
        labels.append(rng.integers(0, C, size=T))
    return maps, labels, C


def par_oracle_gap(instances: int = 50, seed: int = 6) -> tuple[float, float]:
    """(max |compute_par - brute force|, max |row sum - 1| on supported rows)."""
    rng = np.random.default_rng(seed)
    worst, worst_sum = 0.0, 0.0
    for _ in range(instances):
        maps, labels, C = random_par_instance(rng)
        par = compute_par(maps, labels, C)
        ref, support = brute_force_par(maps, labels, C)
        worst = max(worst, float(np.abs(par.values - ref).max()))
        if not np.array_equal(par.support, support):
            worst = math.inf
        rows = par.values[par.supported].sum(axis=1)
        worst_sum = max(worst_sum, float(np.abs(rows - 1.0).max()))
    return worst, worst_sum


def entropy_case_gap() -> float:
    cases = [
        (np.eye(5), np.zeros(5)),
        (np.full((4, 4), 0.25), np.full(4, math.log(4))),
        (np.array([[0.5, 0.25, 0.25]]), np.array([1.5 * math.log(2)])),
    ]
    return max(float(np.abs(row_entropy(a) - want).max()) for a, want in cases)


def run_all(quick: bool = False) -> VerifyReport:
    draws = 20 if quick else 100
    report = VerifyReport()
    report.results.append(_timed("bias-removal invariance", 1e-12, lambda: bias_removal_gap(draws)))
    report.results.append(_timed("reduction chain M5->M1", 1e-10, lambda: reduction_chain_gap(draws)))
    report.results.append(_timed("content-term row constancy", 1e-14, lambda: row_constancy_gap()))
    report.results.append(_timed("permutation equivariance", 1e-12, lambda: permutation_gap()))
    prim = _timed("primitive gradients", 1e-6, primitive_grad_error)
    report.results.append(prim)

    def model_check():
        errs = grad_check_model(max_entries=3 if quick else 6)
        worst_cls = max(errs, key=errs.get)
        return errs[worst_cls], f"worst class {worst_cls}; " + " ".join(f"{k}={v:.1e}" for k, v in errs.items())

    model = _timed("model gradients (2 layers, 2 heads, d_h=8, T=12)", 1e-5, model_check)
    report.results.append(model)
    par_gap, par_rows = par_oracle_gap()
    report.results.append(CheckResult("PAR vs brute-force oracle", par_gap, 1e-12))
    report.results.append(CheckResult("PAR row sums", par_rows, 1e-9))
    report.results.append(_timed("entropy reference cases", 1e-12, entropy_case_gap))
    report.max_grad_error = max(prim.value, model.value)
    return report
