"""Minimal differentiable compute core.

Dense float64 matrices with hand-derived backward rules, a splittable
counter-based RNG, gradient accumulation buffers, and a central-difference
gradient checker. There is no autodiff tape: composite losses assemble their
gradients explicitly from the backward rules defined here, which keeps every
gradient path auditable by `check_gradients`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A public operation produced a non-finite value."""


class RngAlgorithm:
    """Pinned RNG identity, recorded in config output for reproducibility."""

    NAME = "philox4x64 keyed by sha256(seed, split path)"


def _as_array(values, rows=None, cols=None) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got ndim={a.ndim}")
    if rows is not None and a.shape != (rows, cols):
        raise ShapeError(f"expected shape ({rows}, {cols}), got {a.shape}")
    return a


class RealMatrix:
    """Immutable dense 2-D float64 matrix, the single numeric carrier.

    Data is row-major. Column vectors are n-by-1 matrices. Every public
    constructor and operation verifies that all entries are finite.
    """

    __slots__ = ("a",)

    def __init__(self, values, rows: int | None = None, cols: int | None = None):
        a = np.ascontiguousarray(_as_array(values, rows, cols))
        if not np.all(np.isfinite(a)):
            raise NumericError("matrix contains NaN or Inf entries")
        a.flags.writeable = False
        object.__setattr__(self, "a", a)

    def __setattr__(self, name, value):
        raise AttributeError("RealMatrix is immutable")

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "RealMatrix":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "RealMatrix":
        return cls(np.eye(n))

    @classmethod
    def column(cls, values) -> "RealMatrix":
        return cls(np.asarray(values, dtype=np.float64).reshape(-1, 1))

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape

    @property
    def T(self) -> "RealMatrix":
        return RealMatrix(self.a.T)

    def reshape(self, rows: int, cols: int) -> "RealMatrix":
        if rows * cols != self.a.size:
            raise ShapeError(f"cannot reshape {self.shape} to ({rows}, {cols})")
        return RealMatrix(self.a.reshape(rows, cols))

    def ravel(self) -> np.ndarray:
        """Row-major entries as a read-only 1-D view."""
        return self.a.reshape(-1)

    def tolist(self) -> list[list[float]]:
        return self.a.tolist()

    def allclose(self, other: "RealMatrix", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.shape == other.shape and np.allclose(
            self.a, other.a, atol=atol, rtol=rtol
        )

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RealMatrix)
            and self.shape == other.shape
            and np.array_equal(self.a, other.a)
        )

    def __hash__(self):
        return hash((self.shape, self.a.tobytes()))

    def __repr__(self) -> str:
        return f"RealMatrix({self.rows}x{self.cols})"


def matmul(a: RealMatrix, b: RealMatrix) -> RealMatrix:
    """Matrix product a @ b.

    Backward contract: for upstream gradient g of the same shape as the
    result, dL/da = g @ b.T and dL/db = a.T @ g (see `matmul_backward`).
    """
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return RealMatrix(a.a @ b.a)


def matmul_backward(g: RealMatrix, a: RealMatrix, b: RealMatrix) -> tuple[RealMatrix, RealMatrix]:
    if g.shape != (a.rows, b.cols):
        raise ShapeError(f"upstream gradient {g.shape} does not match result ({a.rows}, {b.cols})")
    return RealMatrix(g.a @ b.a.T), RealMatrix(a.a.T @ g.a)


def _require_same_shape(a: RealMatrix, b: RealMatrix, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def relu(x: RealMatrix) -> RealMatrix:
    return RealMatrix(np.maximum(x.a, 0.0))


def relu_backward(g: RealMatrix, x: RealMatrix) -> RealMatrix:
    """Subgradient convention: derivative 0 at exactly 0."""
    _require_same_shape(g, x, "relu_backward")
    return RealMatrix(g.a * (x.a > 0.0))


def sigmoid(x: RealMatrix) -> RealMatrix:
    return RealMatrix(_sigmoid_array(x.a))


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid exp overflow.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(g: RealMatrix, x: RealMatrix) -> RealMatrix:
    _require_same_shape(g, x, "sigmoid_backward")
    s = _sigmoid_array(x.a)
    return RealMatrix(g.a * s * (1.0 - s))


def hadamard(a: RealMatrix, b: RealMatrix) -> RealMatrix:
    _require_same_shape(a, b, "hadamard")
    return RealMatrix(a.a * b.a)


def hadamard_backward(g: RealMatrix, a: RealMatrix, b: RealMatrix) -> tuple[RealMatrix, RealMatrix]:
    _require_same_shape(a, b, "hadamard_backward")
    _require_same_shape(g, a, "hadamard_backward")
    return RealMatrix(g.a * b.a), RealMatrix(g.a * a.a)


def add(a: RealMatrix, b: RealMatrix) -> RealMatrix:
    _require_same_shape(a, b, "add")
    return RealMatrix(a.a + b.a)


def add_backward(g: RealMatrix) -> tuple[RealMatrix, RealMatrix]:
    return g, g


_ELEMENTWISE = {
    "relu": (1, relu),
    "sigmoid": (1, sigmoid),
    "hadamard": (2, hadamard),
    "add": (2, add),
}


def elementwise(op: str, *inputs: RealMatrix) -> RealMatrix:
    """Pointwise op dispatcher over {relu, sigmoid, hadamard, add}."""
    try:
        arity, fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if len(inputs) != arity:
        raise ValueError(f"{op} expects {arity} operand(s), got {len(inputs)}")
    return fn(*inputs)


def elementwise_backward(op: str, g: RealMatrix, *inputs: RealMatrix):
    """Analytic backward rule matching `elementwise(op, *inputs)`."""
    if op == "relu":
        return relu_backward(g, *inputs)
    if op == "sigmoid":
        return sigmoid_backward(g, *inputs)
    if op == "hadamard":
        return hadamard_backward(g, *inputs)
    if op == "add":
        return add_backward(g)
    raise ValueError(f"unknown elementwise op {op!r}")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_nll(logits: RealMatrix, labels: Sequence[int]) -> tuple[float, RealMatrix]:
    """Mean negative log-softmax of the true class over rows.

    Returns (loss, grad) with grad = (softmax - onehot) / N, the full
    backward rule for the mean loss.
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if y.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= k):
        raise IndexError(f"labels must lie in [0, {k})")
    z = logits.a - logits.a.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsumexp - z[np.arange(n), y]))
    grad = softmax_rows(logits.a)
    grad[np.arange(n), y] -= 1.0
    return loss, RealMatrix(grad / n)


class SeededRng:
    """Deterministic, splittable random stream.

    Backed by numpy's counter-based Philox generator; the key is derived by
    hashing the 64-bit seed together with the path of `split` labels, so any
    (seed, label path) pair names the same stream on every run.
    """

    algorithm = RngAlgorithm.NAME

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = _path
        digest = hashlib.sha256()
        digest.update(self.seed.to_bytes(8, "little", signed=True))
        for label in _path:
            digest.update(b"/")
            digest.update(label.encode("utf-8"))
        key = int.from_bytes(digest.digest()[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, label: str) -> "SeededRng":
        """Independent child stream, deterministic in (seed, label path)."""
        return SeededRng(self.seed, self.path + (label,))

    def normal(self, rows: int, cols: int) -> np.ndarray:
        return self._gen.standard_normal((rows, cols))

    def uniform(self, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=(rows, cols))

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def signs(self, n: int) -> np.ndarray:
        """n independent entries from {-1.0, +1.0}."""
        return 2.0 * self._gen.integers(0, 2, size=n) - 1.0

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def sample_standard_normal(rng: SeededRng, rows: int, cols: int) -> RealMatrix:
    """i.i.d. standard normal entries; deterministic given the rng state."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"sample shape must be positive, got ({rows}, {cols})")
    return RealMatrix(rng.normal(rows, cols))


class GradBuffer:
    """Per-parameter gradient accumulators keyed by parameter name."""

    def __init__(self):
        self._buf: dict[str, np.ndarray] = {}

    def add(self, name: str, grad: np.ndarray, scale: float = 1.0) -> None:
        g = np.asarray(grad, dtype=np.float64)
        if name in self._buf:
            if self._buf[name].shape != g.shape:
                raise ShapeError(
                    f"gradient for {name!r} has shape {g.shape}, buffer has {self._buf[name].shape}"
                )
            self._buf[name] += scale * g
        else:
            self._buf[name] = scale * g.copy() if scale != 1.0 else g.copy()

    def get(self, name: str) -> np.ndarray:
        return self._buf[name]

    def get_or_zero(self, name: str, shape: tuple[int, int]) -> np.ndarray:
        return self._buf.get(name, np.zeros(shape))

    def names(self) -> list[str]:
        return sorted(self._buf)

    def zero(self) -> None:
        self._buf.clear()

    def global_norm(self) -> float:
        total = sum(float(np.sum(g * g)) for g in self._buf.values())
        return float(np.sqrt(total))

    def scale_all(self, factor: float) -> None:
        for g in self._buf.values():
            g *= factor

    def __contains__(self, name: str) -> bool:
        return name in self._buf

    def __len__(self) -> int:
        return len(self._buf)


@dataclass
class GradCheckEntry:
    param: str
    index: tuple[int, int]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst: GradCheckEntry | None
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"gradient check: {status} (max rel error {self.max_rel_error:.3e}, tol {self.tol:.1e})"]
        for name in sorted(self.per_param):
            lines.append(f"  {name}: {self.per_param[name]:.3e}")
        if self.worst is not None and not self.passed:
            w = self.worst
            lines.append(
                f"  worst: {w.param}{w.index} analytic={w.analytic:.6e} numeric={w.numeric:.6e}"
            )
        return "\n".join(lines)


LossFn = Callable[[Sequence[RealMatrix]], tuple[float, Sequence[RealMatrix]]]


def check_gradients(
    loss_fn: LossFn,
    params: Sequence[RealMatrix],
    h: float = 1e-5,
    tol: float = 1e-4,
    param_names: Sequence[str] | None = None,
    denom_floor: float = 1e-6,
) -> GradCheckReport:
    """Audit analytic gradients against central finite differences.

    `loss_fn(params)` must return (loss, analytic gradients) and be
    deterministic: any sampling inside it must use frozen noise. Each
    parameter entry is perturbed by +/-h and the relative error
    |analytic - numeric| / max(|analytic|, |numeric|, denom_floor)
    is recorded; the check passes iff the max is at most `tol`.
    """
    if not (0.0 < h <= 1e-3):
        raise ValueError(f"step h must lie in (0, 1e-3], got {h}")
    names = list(param_names) if param_names is not None else [f"p{i}" for i in range(len(params))]
    if len(names) != len(params):
        raise ValueError("param_names length must match params")

    base_loss, analytic = loss_fn(params)
    if not np.isfinite(base_loss):
        raise NumericError(f"loss is non-finite: {base_loss}")
    if len(analytic) != len(params):
        raise ValueError("loss_fn returned wrong number of gradients")

    worst: GradCheckEntry | None = None
    per_param: dict[str, float] = {}
    arrays = [p.a.copy() for p in params]
    for pi, (name, base) in enumerate(zip(names, arrays)):
        if analytic[pi].shape != params[pi].shape:
            raise ShapeError(
                f"gradient for {name} has shape {analytic[pi].shape}, parameter has {params[pi].shape}"
            )
        pmax = 0.0
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                perturbed = [RealMatrix(a) for a in arrays]

                plus = base.copy()
                plus[i, j] += h
                perturbed[pi] = RealMatrix(plus)
                loss_plus, _ = loss_fn(perturbed)

                minus = base.copy()
                minus[i, j] -= h
                perturbed[pi] = RealMatrix(minus)
                loss_minus, _ = loss_fn(perturbed)

                if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                    raise NumericError(f"perturbed loss non-finite at {name}[{i},{j}]")
                numeric = (loss_plus - loss_minus) / (2.0 * h)
                a = float(analytic[pi].a[i, j])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
                pmax = max(pmax, rel)
                if worst is None or rel > worst.rel_error:
                    worst = GradCheckEntry(name, (i, j), a, numeric, rel)
        per_param[name] = pmax

    max_rel = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_error=max_rel, tol=tol, passed=max_rel <= tol, worst=worst, per_param=per_param)
