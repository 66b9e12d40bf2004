"""Dense tensors with a small reverse-mode tape.

Arrays live in numpy; every differentiable primitive used by the encoder is
defined here together with its backward rule.  A ``Tape`` records primitives
while it is active and replays them in reverse to accumulate gradients into
the leaf tensors that have ``requires_grad`` set.

Two working precisions exist: ``Precision.TRAIN`` (float32) for training runs
and ``Precision.CHECK`` (float64), which gradient checks insist on.
"""

from __future__ import annotations

import contextvars
import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class EvaluationError(ValueError):
    """Raised when a function under gradient check is not finite."""


class Precision(enum.Enum):
    TRAIN = "train"
    CHECK = "check"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.TRAIN else np.float64)

    @classmethod
    def of(cls, dtype) -> "Precision":
        return cls.CHECK if np.dtype(dtype) == np.float64 else cls.TRAIN


class Tensor:
    """A numpy array plus the bookkeeping the tape needs.

    The last two axes are the matrix axes; any leading axes are batch axes
    that broadcast like ``numpy.matmul``.
    """

    __slots__ = ("value", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _raise_not_scalar(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single element, got shape {t.shape}")


Matrix = Tensor


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def matrix(rows: Sequence[Sequence[float]], dtype=np.float64) -> Tensor:
    """Build a strictly 2-D tensor from nested rows."""
    arr = np.array(rows, dtype=dtype)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"a matrix needs shape (rows>=1, cols>=1), got {arr.shape}")
    return Tensor(arr)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("phsa_tape", default=None)


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str


@dataclass
class Tape:
    """Records primitives while used as a context manager."""

    nodes: list[_Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward, op: str) -> None:
        self.nodes.append(_Node(output, inputs, backward, op))

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> list[str]:
        """Accumulate d(output)/d(leaf) into ``leaf.grad``.

        Returns the op names in the order they were replayed.
        """
        if seed is None:
            if output.value.size != 1:
                raise ShapeError(f"backward without a seed needs a scalar output, got {output.shape}")
            seed = np.ones_like(output.value)
        produced = {id(n.output) for n in self.nodes}
        pending: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=output.dtype)}
        leaves: dict[int, Tensor] = {}
        if id(output) not in produced and output.requires_grad:
            leaves[id(output)] = output
        visited = []
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            visited.append(node.op)
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _unbroadcast(gi, inp.shape)
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = pending.pop(key)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return visited


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(value, requires_grad=True)
        tape.record(out, inputs, backward, op)
        return out
    return Tensor(value)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    try:
        out = av @ bv
    except ValueError as exc:
        raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}") from exc

    def backward(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _emit(out, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    """Swap the two matrix axes."""
    a = as_tensor(a)
    return _emit(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _emit(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _emit(a.value.sum(keepdims=False).reshape(()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def swish(x) -> Tensor:
    """x * sigmoid(x), applied elementwise."""
    x = as_tensor(x)
    xv = x.value
    s = _sigmoid(xv)

    def backward(g):
        return (g * s * (1.0 + xv * (1.0 - s)),)

    return _emit(xv * s, (x,), backward, "swish")


def _prelu_backward(xv: np.ndarray, av: np.ndarray, g: np.ndarray):
    neg = xv < 0
    gx = np.where(neg, av * g, g)
    ga = np.where(neg, g * xv, 0.0)
    return gx, ga


def prelu(x, alpha) -> Tensor:
    """Identity for x >= 0, ``alpha * x`` otherwise; ``alpha`` is trainable.

    At exactly zero the non-negative branch is used for the gradient.
    """
    x, alpha = _pair(x, alpha)
    xv, av = x.value, alpha.value
    out = np.where(xv >= 0, xv, av * xv)
    return _emit(out, (x, alpha), lambda g: _prelu_backward(xv, av, g), "prelu")


def softmax_rows(s, mask=None) -> Tensor:
    """Softmax along the last axis with per-row max subtraction.

    ``mask`` is a boolean array broadcastable to ``s``; False entries get
    probability exactly zero.  Every row must keep at least one entry.
    """
    s = as_tensor(s)
    sv = s.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), sv.shape)
        sv = np.where(mask, sv, -np.inf)
    e = np.exp(sv - sv.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (s,), backward, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, g * xhat, g

    return _emit(xhat * gv + bias.value, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean of per-row negative log-likelihood.

    ``logits`` has shape (..., C); ``labels`` holds integer classes for the
    leading axes; ``weights`` (same shape as ``labels``) zeroes padded rows.
    """
    logits = as_tensor(logits)
    lv = logits.value
    labels = np.asarray(labels)
    if labels.shape != lv.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {lv.shape}")
    w = np.ones(labels.shape, dtype=lv.dtype) if weights is None else np.asarray(weights, dtype=lv.dtype)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one weighted row")
    shifted = lv - lv.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (w / total)[..., None],)

    return _emit(np.asarray(loss, dtype=lv.dtype), (logits,), backward, "cross_entropy")


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    The gap for one entry is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``max_entries`` samples at most that many entries per parameter.
    """
    params = list(params)
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-4], got {epsilon}")
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f"gradient checks run in check-grade precision; {p!r} is {p.dtype}")

    def evaluate() -> float:
        value = f().item()
        if not np.isfinite(value):
            raise EvaluationError(f"function value is not finite: {value}")
        return value

    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = f()
    if not np.isfinite(out.item()):
        raise EvaluationError(f"function value is not finite: {out.item()}")
    tape.backward(out)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = evaluate()
            flat[i] = orig - epsilon
            fm = evaluate()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    for p, (req, grad) in zip(params, saved):
        p.requires_grad, p.grad = req, grad
    return float(worst)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.value for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit(out, tensors, backward, "stack")
