"""Synthetic few-shot classification tasks with known Bayes accuracy.

Two generators:

  clusters    - K isotropic Gaussian blobs centered on orthogonal axes,
                separation controls overlap; Bayes accuracy comes from a
                1-D integral evaluated to machine precision.
  hetero-xor  - 2-D XOR-quadrant boundary embedded in d_in dims, with a
                region-dependent label-flip rate: inputs in the left
                half-plane flip with rho_hi, the rest with rho_lo. The
                input-dependent noise is what contextual posteriors are
                meant to pick up. Bayes accuracy is 1 - mean flip rate.

Each bundle also carries an abundant source set (for backbone pretraining)
and shifted copies of the test set (inputs rotated in the signal plane and
translated after labeling, so the learned input-label map is wrong under
shift).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, stats

from .numerics import SeededRng

NUISANCE_STD = 0.3

GENERATORS = ("clusters", "hetero-xor")


@dataclass(frozen=True)
class ShiftSpec:
    angle_deg: float
    translation: float


@dataclass(frozen=True)
class DatasetSpec:
    generator: str = "hetero-xor"
    n_train: int = 512
    n_test: int = 512
    k: int = 2
    d_in: int = 16
    rho_lo: float = 0.05
    rho_hi: float = 0.30
    cluster_sep: float = 3.0
    n_source: int = 4096
    k_source: int = 4
    source_sep: float = 3.0
    shift_small: ShiftSpec = field(default_factory=lambda: ShiftSpec(15.0, 0.3))
    shift_large: ShiftSpec = field(default_factory=lambda: ShiftSpec(60.0, 1.5))

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        for name, rho in (("rho_lo", self.rho_lo), ("rho_hi", self.rho_hi)):
            if not 0.0 <= rho < 0.5:
                raise ValueError(f"{name} must lie in [0, 0.5), got {rho}")
        if self.generator == "hetero-xor" and self.k != 2:
            raise ValueError("hetero-xor is a binary task")
        if self.generator == "clusters" and self.k > self.d_in:
            raise ValueError(f"clusters needs k <= d_in, got k={self.k}, d_in={self.d_in}")
        if self.k_source > self.d_in:
            raise ValueError(f"source task needs k_source <= d_in")
        if self.d_in < 2:
            raise ValueError("d_in must be at least 2")
        if min(self.n_train, self.n_test, self.n_source) < 5:
            raise ValueError("dataset sizes must be at least 5")


@dataclass
class DatasetBundle:
    spec: DatasetSpec
    source_x: np.ndarray
    source_y: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    shifted: dict[str, tuple[np.ndarray, np.ndarray]]
    bayes_accuracy: float
    noise_rate: Callable[[np.ndarray], np.ndarray]

    def eval_sets(self) -> list[tuple[str, tuple[np.ndarray, np.ndarray]]]:
        sets = [("test", (self.test_x, self.test_y))]
        sets.extend((name, xy) for name, xy in sorted(self.shifted.items()))
        return sets

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (
            self.source_x, self.source_y, self.train_x, self.train_y,
            self.val_x, self.val_y, self.test_x, self.test_y,
        ):
            h.update(np.ascontiguousarray(arr).tobytes())
        for name in sorted(self.shifted):
            x, y = self.shifted[name]
            h.update(name.encode())
            h.update(np.ascontiguousarray(x).tobytes())
            h.update(np.ascontiguousarray(y).tobytes())
        return h.hexdigest()


def cluster_bayes_accuracy(sep: float, k: int) -> float:
    """P(correct) for equal-prior unit-variance blobs on orthogonal axes.

    The Bayes rule is nearest-center; conditioning on the true class makes
    the K signal coordinates independent normals, so
    P = integral phi(t) Phi(t + sep)^(K-1) dt.
    """
    if k == 1:
        return 1.0
    value, _ = integrate.quad(
        lambda t: stats.norm.pdf(t) * stats.norm.cdf(t + sep) ** (k - 1),
        -np.inf,
        np.inf,
    )
    return float(value)


def _gen_clusters(n: int, k: int, d_in: int, sep: float, rng: SeededRng):
    y = rng.integers(0, k, n)
    x = rng.normal(n, d_in)
    x[np.arange(n), y] += sep
    return x, y.astype(np.int64)


def _gen_hetero_xor(n: int, d_in: int, rho_lo: float, rho_hi: float, rng: SeededRng):
    x = np.empty((n, d_in))
    x[:, :2] = rng.uniform(n, 2, low=-1.0, high=1.0)
    if d_in > 2:
        x[:, 2:] = rng.normal(n, d_in - 2) * NUISANCE_STD
    y_clean = (x[:, 0] * x[:, 1] > 0).astype(np.int64)
    rho = np.where(x[:, 0] < 0, rho_hi, rho_lo)
    flip = rng.uniform(n, 1).reshape(-1) < rho
    return x, np.where(flip, 1 - y_clean, y_clean)


def _xor_noise_rate(spec: DatasetSpec) -> Callable[[np.ndarray], np.ndarray]:
    def rate(x: np.ndarray) -> np.ndarray:
        x2 = np.atleast_2d(x)
        return np.where(x2[:, 0] < 0, spec.rho_hi, spec.rho_lo)

    return rate


def apply_shift(x: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    """Rotate the signal plane (first two coordinates) and translate in it."""
    angle = math.radians(shift.angle_deg)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    out = x.copy()
    out[:, :2] = x[:, :2] @ rot.T + shift.translation / math.sqrt(2.0)
    return out


def generate_dataset(spec: DatasetSpec, rng: SeededRng) -> DatasetBundle:
    """Deterministic-in-seed bundle: source, 80/20 target split, test, shifts."""
    source_x, source_y = _gen_clusters(
        spec.n_source, spec.k_source, spec.d_in, spec.source_sep, rng.split("source")
    )

    if spec.generator == "clusters":
        gen = lambda n, r: _gen_clusters(n, spec.k, spec.d_in, spec.cluster_sep, r)
        bayes = cluster_bayes_accuracy(spec.cluster_sep, spec.k)
        noise_rate = lambda x: np.zeros(len(np.atleast_2d(x)))
    else:
        gen = lambda n, r: _gen_hetero_xor(n, spec.d_in, spec.rho_lo, spec.rho_hi, r)
        bayes = 1.0 - (spec.rho_lo + spec.rho_hi) / 2.0
        noise_rate = _xor_noise_rate(spec)

    pool_x, pool_y = gen(spec.n_train, rng.split("target-train"))
    test_x, test_y = gen(spec.n_test, rng.split("target-test"))

    perm = rng.split("split").permutation(spec.n_train)
    n_fit = int(0.8 * spec.n_train)
    fit_idx, val_idx = perm[:n_fit], perm[n_fit:]

    shifted = {
        "shift_small": (apply_shift(test_x, spec.shift_small), test_y),
        "shift_large": (apply_shift(test_x, spec.shift_large), test_y),
    }
    return DatasetBundle(
        spec=spec,
        source_x=source_x,
        source_y=source_y,
        train_x=pool_x[fit_idx],
        train_y=pool_y[fit_idx],
        val_x=pool_x[val_idx],
        val_y=pool_y[val_idx],
        test_x=test_x,
        test_y=test_y,
        shifted=shifted,
        bayes_accuracy=bayes,
        noise_rate=noise_rate,
    )
