"""Deterministic small-tensor numerics.

Everything downstream builds on this module: a tagged array carrier,
counter-based random streams, truncated-normal initialization, bfloat16
emulation, a small vocabulary of primitive ops with hand-written backward
passes, and a central-finite-difference gradient checker.

Arrays are plain ``np.ndarray`` in float32 (the gradient checker runs the
same code in float64). There is no autodiff tape: each primitive exposes a
``*_backward`` sibling, and composite layers chain them by hand so the
numerics stay auditable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "InvalidArgumentError",
    "NumericError",
    "Tensor",
    "tensor",
    "RngStream",
    "trunc_normal_init",
    "softmax",
    "softmax_backward",
    "quantize_bf16",
    "is_bf16_exact",
    "matmul",
    "matmul_backward",
    "add",
    "add_backward",
    "multiply",
    "multiply_backward",
    "relu",
    "relu_backward",
    "scale",
    "scale_backward",
    "reduce_sum",
    "reduce_sum_backward",
    "reduce_mean",
    "reduce_mean_backward",
    "one_hot",
    "cumsum",
    "cumsum_backward",
    "GradReport",
    "grad_check",
]


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition (bad shape, bad range)."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


_FLOAT_DTYPES = (np.float32, np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(
            f"{op}: operand shapes {a.shape} and {b.shape} do not match"
        )


# ---------------------------------------------------------------------------
# Tagged value carrier
# ---------------------------------------------------------------------------


@dataclass
class Tensor:
    """A dense array plus a precision tag.

    Computation happens on raw arrays; this wrapper exists where the tag is
    load-bearing: bfloat16-quantized buffers (combine tensors, comm payloads)
    and checkpoint records. ``precision_tag`` is ``"full"`` or ``"bf16"``;
    a ``"bf16"`` tensor must hold only values exactly representable in
    bfloat16 (8-bit exponent, 7-bit mantissa), which is validated here.
    """

    data: np.ndarray
    precision_tag: str = "full"

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.dtype not in _FLOAT_DTYPES:
            self.data = self.data.astype(np.float32)
        if self.precision_tag not in ("full", "bf16"):
            raise InvalidArgumentError(
                f"precision_tag must be 'full' or 'bf16', got {self.precision_tag!r}"
            )
        if self.precision_tag == "bf16" and not is_bf16_exact(self.data):
            raise InvalidArgumentError(
                "bf16-tagged tensor holds values not representable in bfloat16"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)


def tensor(values, precision_tag: str = "full") -> Tensor:
    """Build a float32 Tensor from array-like values."""
    return Tensor(np.asarray(values, dtype=np.float32), precision_tag)


# ---------------------------------------------------------------------------
# Counter-based random streams
# ---------------------------------------------------------------------------


@dataclass
class RngStream:
    """Reproducible random stream with labeled substreams.

    Each draw builds a fresh Philox generator keyed by the SHA-256 digest of
    ``(seed, label, counter)`` and then bumps ``counter``. Identical
    (seed, label, counter) triples therefore produce identical output
    regardless of how much any earlier draw consumed, and regardless of the
    order in which sibling substreams are used.
    """

    seed: int
    label: str = ""
    counter: int = 0

    def substream(self, label: str) -> "RngStream":
        """Derive an independent stream; nested labels join with '/'."""
        child = f"{self.label}/{label}" if self.label else label
        return RngStream(self.seed, child, 0)

    def _generator(self) -> np.random.Generator:
        digest = hashlib.sha256(
            f"{self.seed}|{self.label}|{self.counter}".encode()
        ).digest()
        self.counter += 1
        key = int.from_bytes(digest[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def uniform(
        self, shape: Sequence[int] | int = (), low: float = 0.0, high: float = 1.0
    ) -> np.ndarray:
        return self._generator().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._generator().choice(n, size=k, replace=False)

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """Sample one index per row of a [rows, k] probability matrix."""
        u = self._generator().uniform(0.0, 1.0, probs.shape[0])
        cdf = np.cumsum(probs.astype(np.float64), axis=1)
        cdf[:, -1] = 1.0  # guard against round-off shortfall
        return (u[:, None] > cdf).sum(axis=1).astype(np.int64)

    def state(self) -> dict:
        return {"seed": int(self.seed), "label": self.label, "counter": int(self.counter)}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(int(state["seed"]), str(state["label"]), int(state["counter"]))


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def trunc_normal_init(
    shape: Sequence[int], scale: float, fan_in: int, rng: RngStream
) -> np.ndarray:
    """Draw from normal(0, sigma = sqrt(scale / fan_in)) truncated to [-2sigma, 2sigma].

    Out-of-range draws are resampled (not clipped), so the result is an exact
    sample from the truncated density. The default scale for all model
    weights in this package is 0.1, a tenth of the usual transformer scale.
    """
    if scale <= 0:
        raise InvalidArgumentError(f"scale must be positive, got {scale}")
    if fan_in < 1:
        raise InvalidArgumentError(f"fan_in must be >= 1, got {fan_in}")
    sigma = np.sqrt(scale / fan_in)
    z = rng.normal(shape)
    out_of_range = np.abs(z) > 2.0
    while out_of_range.any():
        z = np.where(out_of_range, rng.normal(shape), z)
        out_of_range = np.abs(z) > 2.0
    return (sigma * z).astype(np.float32)


# ---------------------------------------------------------------------------
# Softmax
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``; raises on non-finite input."""
    logits = np.asarray(logits)
    if logits.shape[axis] < 1:
        raise InvalidArgumentError(f"softmax axis {axis} has extent 0")
    if not np.isfinite(logits).all():
        raise NumericError("softmax received non-finite logits")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(
    grad_out: np.ndarray, softmax_out: np.ndarray, axis: int = -1
) -> np.ndarray:
    """Gradient of loss w.r.t. logits given grad w.r.t. softmax output."""
    inner = np.sum(grad_out * softmax_out, axis=axis, keepdims=True)
    return softmax_out * (grad_out - inner)


# ---------------------------------------------------------------------------
# bfloat16 emulation
# ---------------------------------------------------------------------------


def quantize_bf16(x):
    """Round every element to the nearest bfloat16, ties to even.

    Storage stays float32; only the value set shrinks. Infinities pass
    through, NaN stays NaN, and finite values beyond the bfloat16 range round
    to infinity. Given a ``Tensor``, returns a ``Tensor`` tagged ``"bf16"``.
    """
    if isinstance(x, Tensor):
        return Tensor(quantize_bf16(x.data), "bf16")
    a = np.ascontiguousarray(np.asarray(x, dtype=np.float32))
    bits = a.view(np.uint32).astype(np.uint64)
    # Round-to-nearest-even on the top 16 bits: add 0x7FFF plus the lowest
    # kept bit, then truncate the mantissa tail.
    rounded = ((bits + 0x7FFF + ((bits >> 16) & 1)) & 0xFFFF0000).astype(np.uint32)
    out = rounded.view(np.float32).reshape(a.shape).copy()
    finite = np.isfinite(a)
    if not finite.all():
        out = np.where(finite, out, a)
    return out


def is_bf16_exact(x) -> bool:
    """True if every element is already representable in bfloat16."""
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    return bool(np.array_equal(quantize_bf16(a), a, equal_nan=True))


# ---------------------------------------------------------------------------
# Primitive ops, forward and backward
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[-1] != b.shape[0]:
        raise InvalidArgumentError(
            f"matmul: inner dimensions of {a.shape} and {b.shape} do not agree"
        )
    return a @ b


def matmul_backward(
    grad_out: np.ndarray, a: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    return grad_out @ b.T, a.T @ grad_out


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _check_same_shape(a, b, "add")
    return a + b


def add_backward(grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad_out, grad_out


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _check_same_shape(a, b, "multiply")
    return a * b


def multiply_backward(
    grad_out: np.ndarray, a: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    return grad_out * b, grad_out * a


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (np.asarray(x) > 0)


def scale(x: np.ndarray, c: float) -> np.ndarray:
    return np.asarray(x) * c


def scale_backward(grad_out: np.ndarray, c: float) -> np.ndarray:
    return grad_out * c


def reduce_sum(x: np.ndarray, axis: int | None = None) -> np.ndarray:
    return np.sum(np.asarray(x), axis=axis)


def reduce_sum_backward(
    grad_out: np.ndarray, x_shape: tuple[int, ...], axis: int | None = None
) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(grad_out, x_shape).copy()
    return np.broadcast_to(np.expand_dims(grad_out, axis), x_shape).copy()


def reduce_mean(x: np.ndarray, axis: int | None = None) -> np.ndarray:
    return np.mean(np.asarray(x), axis=axis)


def reduce_mean_backward(
    grad_out: np.ndarray, x_shape: tuple[int, ...], axis: int | None = None
) -> np.ndarray:
    n = int(np.prod(x_shape)) if axis is None else x_shape[axis]
    return reduce_sum_backward(grad_out, x_shape, axis) / n


def one_hot(indices: np.ndarray, depth: int) -> np.ndarray:
    """Float one-hot encoding along a trailing axis of extent ``depth``."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= depth):
        raise InvalidArgumentError(
            f"one_hot: indices out of range for depth {depth}"
        )
    out = np.zeros(idx.shape + (depth,), dtype=np.float32)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def cumsum(x: np.ndarray, axis: int) -> np.ndarray:
    return np.cumsum(np.asarray(x), axis=axis)


def cumsum_backward(grad_out: np.ndarray, axis: int) -> np.ndarray:
    # d(cumsum)/dx is lower-triangular, so the backward is a reversed cumsum.
    g = np.flip(grad_out, axis=axis)
    return np.flip(np.cumsum(g, axis=axis), axis=axis)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of one finite-difference check.

    ``param_errors`` holds the max relative error per parameter in the order
    they were supplied; ``max_rel_err`` is the overall worst coordinate.
    Relative error uses max(|analytic|, |numeric|, 1e-8) in the denominator.
    """

    param_errors: list[float]
    max_rel_err: float
    tol: float
    passed: bool
    step: float = 1e-3
    details: list[str] = field(default_factory=list)


def grad_check(
    f: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    params: Sequence[np.ndarray],
    h: float = 1e-3,
    tol: float = 1e-4,
) -> GradReport:
    """Compare analytic gradients against central finite differences.

    ``f`` maps a list of parameter arrays to ``(loss, grads)`` where
    ``grads[i]`` has the shape of ``params[i]``. The check runs entirely in
    float64: parameters are upcast, and since every op in this package is
    dtype-preserving the composite evaluates at float64 too. The caller is
    responsible for keeping inputs away from relu kinks and routing-decision
    boundaries so that f is differentiable where probed.
    """
    base = [np.asarray(p, dtype=np.float64).copy() for p in params]
    loss0, analytic = f(base)
    if not np.isfinite(loss0):
        raise NumericError("grad_check: f returned a non-finite loss")
    analytic = [np.asarray(g, dtype=np.float64) for g in analytic]

    eps_abs = 1e-8
    errors: list[float] = []
    details: list[str] = []
    for i, p in enumerate(base):
        if analytic[i].shape != p.shape:
            raise InvalidArgumentError(
                f"grad_check: gradient {i} shape {analytic[i].shape} "
                f"does not match parameter shape {p.shape}"
            )
        worst = 0.0
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus, _ = f(base)
            flat[j] = orig - h
            minus, _ = f(base)
            flat[j] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError("grad_check: non-finite loss during probing")
            numeric = (plus - minus) / (2.0 * h)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), eps_abs)
            if err > worst:
                worst = err
                if err > tol:
                    details.append(
                        f"param {i} coord {j}: analytic {a:.6g} vs fd {numeric:.6g}"
                    )
        errors.append(worst)
    max_err = max(errors) if errors else 0.0
    return GradReport(errors, max_err, tol, max_err <= tol, h, details)
