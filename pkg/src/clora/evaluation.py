"""Accuracy and calibration metrics, temperature scaling, evaluation wrappers.

Confidence is the max class probability; calibration error bins confidences
into equal-width right-inclusive bins over [0, 1] and takes the
count-weighted mean absolute accuracy-confidence gap. Temperature applies
to logits before the softmax, and under Monte-Carlo prediction to each
draw's logits before probabilities are averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import AdaptedModel, predictive, predictive_logit_draws
from .numerics import RealMatrix, SeededRng, softmax_rows

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class PredictionSet:
    """N rows of class probabilities with their true labels."""

    probs: RealMatrix
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "labels", labels)
        n, k = self.probs.shape
        if n == 0:
            raise ValueError("prediction set must be nonempty")
        if labels.shape[0] != n:
            raise ValueError(f"{n} probability rows but {labels.shape[0]} labels")
        if np.any(labels < 0) or np.any(labels >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        p = self.probs.a
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("probability rows must sum to 1 within 1e-9")

    @property
    def n(self) -> int:
        return self.probs.rows

    @property
    def k(self) -> int:
        return self.probs.cols


@dataclass(frozen=True)
class BinRecord:
    index: int
    lo: float
    hi: float
    count: int
    acc: float
    conf: float


@dataclass
class CalibrationReport:
    acc: float
    ece: float
    nll: float
    bins: list[BinRecord]
    n: int
    m: int
    temperature: Optional[float] = None

    def __post_init__(self):
        total = sum(b.count for b in self.bins)
        if total != self.n:
            raise ValueError(f"bin counts sum to {total}, expected {self.n}")
        recomputed = sum(b.count / self.n * abs(b.acc - b.conf) for b in self.bins)
        if abs(recomputed - self.ece) > 1e-12:
            raise ValueError("reported ece does not match its bin records")

    def to_dict(self) -> dict:
        return {
            "acc": self.acc,
            "ece": self.ece,
            "nll": self.nll,
            "n": self.n,
            "m": self.m,
            "temperature": self.temperature,
            "bins": [
                {
                    "index": b.index,
                    "lo": b.lo,
                    "hi": b.hi,
                    "count": b.count,
                    "acc": b.acc,
                    "conf": b.conf,
                }
                for b in self.bins
            ],
        }


@dataclass(frozen=True)
class TemperatureFit:
    t: float
    val_nll_before: float
    val_nll_after: float

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"temperature must be positive, got {self.t}")
        if self.val_nll_after > self.val_nll_before + 1e-9:
            raise ValueError("fitted temperature must not worsen validation NLL")


def accuracy(p: PredictionSet) -> float:
    """Fraction of rows whose argmax matches the label; ties take the lowest index."""
    preds = np.argmax(p.probs.a, axis=1)
    return float(np.mean(preds == p.labels))


def ece(p: PredictionSet, bins: int) -> tuple[float, list[BinRecord]]:
    """Expected calibration error with equal-width right-inclusive bins."""
    if bins < 1:
        raise ValueError(f"bin count must be >= 1, got {bins}")
    conf = p.probs.a.max(axis=1)
    correct = (np.argmax(p.probs.a, axis=1) == p.labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    records = []
    value = 0.0
    for b in range(bins):
        sel = idx == b
        count = int(sel.sum())
        if count:
            bin_acc = float(correct[sel].mean())
            bin_conf = float(conf[sel].mean())
            value += count / p.n * abs(bin_acc - bin_conf)
        else:
            bin_acc = bin_conf = 0.0
        records.append(
            BinRecord(index=b, lo=b / bins, hi=(b + 1) / bins, count=count, acc=bin_acc, conf=bin_conf)
        )
    return value, records


def nll(p: PredictionSet) -> float:
    """Mean negative log probability of the true label, floored at 1e-12."""
    picked = p.probs.a[np.arange(p.n), p.labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def _probs_from_logit_stack(stack: np.ndarray, temperature: float) -> np.ndarray:
    """(m, N, K) logits -> (N, K) probabilities, scaling each draw's logits."""
    scaled = stack / temperature
    probs = np.stack([softmax_rows(scaled[i]) for i in range(scaled.shape[0])])
    return probs.mean(axis=0)


def _as_logit_stack(val_logits) -> np.ndarray:
    if isinstance(val_logits, RealMatrix):
        return val_logits.a[None, :, :]
    arr = np.asarray(val_logits, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None, :, :]
    if arr.ndim == 3:
        return arr
    raise ValueError(f"expected (N,K) logits or an (m,N,K) stack, got ndim={arr.ndim}")


def fit_temperature(val_logits, val_labels) -> TemperatureFit:
    """Golden-section search for the NLL-minimizing temperature on [0.05, 20].

    Accepts a single logits matrix or a stack of Monte-Carlo draws; in the
    stacked case each draw is scaled before probabilities are averaged.
    """
    stack = _as_logit_stack(val_logits)
    if not np.all(np.isfinite(stack)):
        raise ValueError("logits must be finite")
    y = np.asarray(val_labels, dtype=np.int64).reshape(-1)
    n = stack.shape[1]
    if y.shape[0] != n:
        raise ValueError(f"{n} logit rows but {y.shape[0]} labels")

    def nll_at(t: float) -> float:
        probs = _probs_from_logit_stack(stack, t)
        picked = probs[np.arange(n), y]
        return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))

    lo, hi = 0.05, 20.0
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = nll_at(c), nll_at(d)
    while b - a > 1e-4:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = nll_at(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = nll_at(d)
    t_star = (a + b) / 2.0
    before = nll_at(1.0)
    after = nll_at(t_star)
    if after > before:
        t_star, after = 1.0, before
    return TemperatureFit(t=t_star, val_nll_before=before, val_nll_after=after)


def prediction_set(
    model: AdaptedModel,
    xs: np.ndarray,
    ys: np.ndarray,
    m: int,
    rng: SeededRng | None = None,
    temperature: Optional[float] = None,
) -> PredictionSet:
    """Predictive probabilities over a labeled set, optionally tempered."""
    rows = []
    for i in range(len(xs)):
        ex_rng = None if rng is None else rng.split(f"ex{i}")
        if temperature is None:
            rows.append(predictive(model, xs[i], m, ex_rng))
        else:
            stack = predictive_logit_draws(model, xs[i], m, ex_rng)
            rows.append(_probs_from_logit_stack(stack[:, None, :], temperature)[0])
    return PredictionSet(probs=RealMatrix(np.stack(rows)), labels=ys)


def evaluate(
    model: AdaptedModel,
    dataset: tuple[np.ndarray, np.ndarray],
    m: int,
    bins: int,
    temperature: Optional[float] = None,
    rng: SeededRng | None = None,
) -> CalibrationReport:
    """Full calibration report for one model on one labeled dataset."""
    xs, ys = dataset
    if xs.shape[1] != model.backbone.d_in:
        raise ValueError(
            f"dataset has {xs.shape[1]} features, model expects {model.backbone.d_in}"
        )
    pset = prediction_set(model, xs, ys, m, rng, temperature)
    ece_value, records = ece(pset, bins)
    return CalibrationReport(
        acc=accuracy(pset),
        ece=ece_value,
        nll=nll(pset),
        bins=records,
        n=pset.n,
        m=m,
        temperature=temperature,
    )
