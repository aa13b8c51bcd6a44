"""ELBO assembly and the fine-tuning loop.

Each step draws one noise realization per example (flipout batching),
computes the data-fit and KL gradient channels off a shared forward trace,
and routes them: deterministic parameters are updated by AdamW from the
data-fit channel alone; posterior parameters additionally receive the KL
channel through plain SGD with a linearly decaying rate. Validation runs
every `eval_every` steps and the parameters minimizing
(1 - ACC_val) * ECE_val are kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import evaluation
from .adapters import Variant
from .model import AdaptedModel, backward_example, forward
from .numerics import GradBuffer, NumericError, RealMatrix, SeededRng
from .optim import AdamW, LinearDecaySgd
from .variational import DiagonalGaussian, FixedPrior, FlipoutNoise, kl_sampled, kl_to_prior


@dataclass
class TrainConfig:
    lr_main: float = 1e-4
    lr_kl: float = 0.05
    batch_size: int = 4
    iters: int = 1500
    eval_every: int = 100
    weight_decay: float = 0.01
    kl_scale: Optional[float] = None   # None means 1/N_train; 1.0 is the literal per-sample weight
    sigma_p: float = 1.0
    kl_estimator: str = "closed"       # "sampled" keeps the raw log-ratio path for audits
    mc_samples_train: int = 1
    mc_samples_eval: int = 10
    val_bins: int = 15
    grad_clip: float = 10.0
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.iters <= 0:
            raise ValueError(f"iters must be positive, got {self.iters}")
        if not 1 <= self.eval_every <= self.iters:
            raise ValueError(
                f"eval_every must lie in [1, iters], got {self.eval_every} with iters={self.iters}"
            )
        if self.kl_scale is not None and self.kl_scale < 0:
            raise ValueError(f"kl_scale must be >= 0, got {self.kl_scale}")
        if self.kl_estimator not in ("closed", "sampled"):
            raise ValueError(f"unknown kl estimator {self.kl_estimator!r}")

    def resolve_kl_scale(self, n_train: int) -> float:
        return 1.0 / n_train if self.kl_scale is None else self.kl_scale


@dataclass
class TrainData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


@dataclass
class HistoryRow:
    step: int
    nll: float
    kl: float
    acc_val: float
    ece_val: float
    criterion: float


@dataclass
class CheckpointState:
    best_criterion: float
    best_step: int
    best_acc: float
    best_ece: float
    best_params: dict[str, RealMatrix]
    history: list[HistoryRow] = field(default_factory=list)


@dataclass
class ExampleNoise:
    layer_eps: Optional[list] = None
    layer_noise: Optional[list[Optional[FlipoutNoise]]] = None
    dropout_masks: Optional[list[np.ndarray]] = None


@dataclass
class BatchNoise:
    mode: str
    per_example: list[ExampleNoise]


def draw_batch_noise(
    model: AdaptedModel, n: int, rng: SeededRng, mode: str = "flipout"
) -> BatchNoise:
    """One noise realization per example; flipout shares eps across the batch."""
    shared = model.draw_shared_eps(rng.split("shared")) if mode == "flipout" else None
    per_example = []
    for i in range(n):
        ex_rng = rng.split(f"ex{i}")
        ex = ExampleNoise()
        if mode == "flipout":
            ex.layer_noise = model.draw_flipout(shared, ex_rng.split("signs"))
        elif mode == "sample":
            ex.layer_eps = model.draw_layer_eps(ex_rng.split("eps"))
        if model.config.dropout > 0.0 and mode != "mean":
            ex.dropout_masks = model.draw_dropout_masks(ex_rng.split("dropout"))
        per_example.append(ex)
    return BatchNoise(mode=mode, per_example=per_example)


def _layer_kl(cache, sigma_p: float, estimator: str):
    """(value, d/dmu, d/domega) of one layer's divergence, unscaled."""
    mu = cache.mu if cache.mu.ndim == 2 else cache.mu.reshape(-1, 1)
    omega = cache.omega if cache.omega.ndim == 2 else cache.omega.reshape(-1, 1)
    q = DiagonalGaussian(RealMatrix(mu), RealMatrix(omega))
    prior = FixedPrior(sigma_p)
    if estimator == "closed":
        res = kl_to_prior(q, prior)
    else:
        res = kl_sampled(q, prior, RealMatrix(cache.noise.reshape(mu.shape)))
    return res.value, res.grad_mu.a, res.grad_omega.a


@dataclass
class ElboResult:
    nll: float
    kl: float
    nll_per_example: list[float]
    kl_per_example: list[float]
    grads_nll: GradBuffer
    grads_kl: GradBuffer
    kl_scale: float

    @property
    def loss(self) -> float:
        return self.nll + self.kl


def elbo_terms(
    model: AdaptedModel,
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    noise: BatchNoise,
    config: TrainConfig,
    n_train: int,
    kl_into_theta: bool = False,
) -> ElboResult:
    """Mean NLL at the sampled cores plus the scaled mean per-example KL.

    Gradients are split into the two channels; the KL channel touches the
    deterministic parameters only when `kl_into_theta` is set (used by the
    full-gradient audit, never by training updates).
    """
    n = len(batch_x)
    if n == 0:
        raise ValueError("batch must be nonempty")
    kl_scale = config.resolve_kl_scale(n_train)
    has_posterior = model.config.variant is not Variant.MAP
    grads_nll, grads_kl = GradBuffer(), GradBuffer()
    nlls, kls = [], []
    for i in range(n):
        ex = noise.per_example[i]
        try:
            _, trace = forward(
                model,
                batch_x[i],
                mode=noise.mode,
                layer_eps=ex.layer_eps,
                layer_noise=ex.layer_noise,
                dropout_masks=ex.dropout_masks,
            )
            kl_seeds = None
            kl_i = 0.0
            if has_posterior:
                kl_seeds = []
                for cache in trace.caches:
                    value, dmu, domega = _layer_kl(cache, config.sigma_p, config.kl_estimator)
                    kl_i += value
                    kl_seeds.append((kl_scale * dmu, kl_scale * domega))
            nll_i = backward_example(
                model,
                trace,
                int(batch_y[i]),
                grads_nll,
                grads_kl if has_posterior else None,
                kl_seeds,
                kl_into_theta=kl_into_theta,
                scale=1.0 / n,
            )
        except NumericError as err:
            raise NumericError(f"example {i} of batch: {err}") from err
        if not math.isfinite(nll_i) or not math.isfinite(kl_i):
            raise NumericError(f"non-finite loss at example {i}: nll={nll_i}, kl={kl_i}")
        nlls.append(nll_i)
        kls.append(kl_i)
    return ElboResult(
        nll=float(np.mean(nlls)),
        kl=kl_scale * float(np.mean(kls)),
        nll_per_example=nlls,
        kl_per_example=kls,
        grads_nll=grads_nll,
        grads_kl=grads_kl,
        kl_scale=kl_scale,
    )


def clip_global_norm(grads: GradBuffer, max_norm: float) -> float:
    norm = grads.global_norm()
    if norm > max_norm > 0:
        grads.scale_all(max_norm / norm)
    return norm


def step_theta(model: AdaptedModel, elbo: ElboResult, opt: AdamW) -> None:
    """Update the deterministic parameters from the data-fit channel only."""
    names = model.theta_names()
    updated = opt.step(model.snapshot(names), elbo.grads_nll, names)
    for name, value in updated.items():
        model.set_param(name, value)


def step_phi(
    model: AdaptedModel,
    elbo: ElboResult,
    opt_main: AdamW,
    opt_kl: LinearDecaySgd,
    step_index: int,
) -> None:
    """Update posterior parameters: data-fit via AdamW, KL via decaying SGD."""
    names = model.phi_names()
    if not names:
        return
    updated = opt_main.step(model.snapshot(names), elbo.grads_nll, names)
    for name, value in updated.items():
        model.set_param(name, value)
    updated = opt_kl.step(model.snapshot(names), elbo.grads_kl, names, step_index)
    for name, value in updated.items():
        model.set_param(name, value)


def checkpoint_criterion(acc_val: float, ece_val: float) -> float:
    """(1 - ACC_val) * ECE_val; lower is better."""
    if not 0.0 <= acc_val <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {acc_val}")
    if not 0.0 <= ece_val <= 1.0:
        raise ValueError(f"calibration error must lie in [0, 1], got {ece_val}")
    return (1.0 - acc_val) * ece_val


def eval_sample_count(model: AdaptedModel, config: TrainConfig) -> int:
    """Stochastic variants validate with MC draws; plain map uses the mean."""
    if model.config.variant is Variant.MAP and model.config.dropout == 0.0:
        return 0
    return config.mc_samples_eval


def _validation_metrics(model, data: TrainData, config: TrainConfig, rng: SeededRng):
    m = eval_sample_count(model, config)
    pset = evaluation.prediction_set(model, data.x_val, data.y_val, m, rng)
    acc = evaluation.accuracy(pset)
    ece, _ = evaluation.ece(pset, config.val_bins)
    return acc, ece


def train(
    model: AdaptedModel, data: TrainData, config: TrainConfig, rng: SeededRng
) -> CheckpointState:
    """Run the fine-tuning loop and leave the best parameters restored.

    Deterministic in (model init, data, config, rng seed): batches, noise
    and validation sampling all come from named splits of `rng`. Validation
    reuses the same split labels at every evaluation, so checkpoint
    comparisons see common random numbers and the recorded metrics can be
    reproduced from the restored parameters.
    """
    if len(data.x_train) == 0 or len(data.x_val) == 0:
        raise ValueError("train and validation splits must be nonempty")
    n_train = len(data.x_train)
    trainable = model.theta_names() + model.phi_names()

    opt_theta = AdamW(lr=config.lr_main, weight_decay=config.weight_decay)
    opt_phi = AdamW(lr=config.lr_main, weight_decay=0.0)
    opt_kl = LinearDecaySgd(lr=config.lr_kl, total_steps=config.iters)

    # First evaluation happens after eval_every steps; the raw initialization
    # is not a checkpoint candidate.
    best: CheckpointState | None = None

    for t in range(1, config.iters + 1):
        step_rng = rng.split(f"step{t}")
        idx = step_rng.split("batch").integers(0, n_train, config.batch_size)
        noise = draw_batch_noise(
            model, config.batch_size, step_rng.split("noise"), mode="flipout"
        )
        try:
            elbo = elbo_terms(
                model, data.x_train[idx], data.y_train[idx], noise, config, n_train
            )
        except NumericError as err:
            raise NumericError(f"step {t}: {err}") from err
        clip_global_norm(elbo.grads_nll, config.grad_clip)
        clip_global_norm(elbo.grads_kl, config.grad_clip)
        step_theta(model, elbo, opt_theta)
        step_phi(model, elbo, opt_phi, opt_kl, step_index=t - 1)

        if t % config.eval_every == 0:
            acc, ece = _validation_metrics(model, data, config, rng.split("val-eval"))
            crit = checkpoint_criterion(acc, ece)
            if best is None:
                best = CheckpointState(
                    best_criterion=crit, best_step=t, best_acc=acc, best_ece=ece,
                    best_params=model.snapshot(trainable),
                )
            best.history.append(HistoryRow(t, elbo.nll, elbo.kl, acc, ece, crit))
            if crit < best.best_criterion:
                best.best_criterion = crit
                best.best_step = t
                best.best_acc = acc
                best.best_ece = ece
                best.best_params = model.snapshot(trainable)

    assert best is not None  # eval_every <= iters is validated
    model.restore(best.best_params)
    return best
