"""The adapted network and its hand-assembled gradients.

A frozen multilayer backbone (embedding plus L square hidden layers with
ReLU) is wrapped with one adapter per layer and a trainable classifier
head. Forward passes run in mean / sample / flipout modes. Posterior
parameters at layer l are predicted from z^l = A^l x^{l-1}, and since
x^{l-1} already depends on the cores drawn at earlier layers, per-layer
sampling is autoregressive across depth.

Backward runs in two channels over the shared trace: the data-fit channel
(gradient of the per-example negative log-likelihood) and the KL channel
(gradient of the posterior-to-prior divergences, seeded at each layer's
(mu, omega) and propagated down the input path). Deterministic parameters
receive the KL channel only when explicitly requested, which training never
does; full-gradient audits do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adapters import (
    AdapterConfig,
    AdapterStack,
    LayerCache,
    Variant,
    adapter_backward,
    adapter_forward,
    dropout_mask,
)
from .numerics import (
    GradBuffer,
    NumericError,
    RealMatrix,
    SeededRng,
    ShapeError,
    softmax_rows,
)
from .optim import AdamW
from .variational import FlipoutNoise


class PretrainError(RuntimeError):
    """Backbone pretraining missed its accuracy target within budget."""


@dataclass
class Backbone:
    """Frozen feature extractor: linear embedding then L ReLU layers."""

    emb: RealMatrix                # (d, d_in)
    layers: list[RealMatrix]       # L matrices of shape (d, d)
    source_accuracy: float = float("nan")

    @property
    def d(self) -> int:
        return self.emb.rows

    @property
    def d_in(self) -> int:
        return self.emb.cols

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def features(self, x_batch: np.ndarray) -> np.ndarray:
        """Frozen forward for a batch of inputs, no adapters."""
        h = x_batch @ self.emb.a.T
        for w in self.layers:
            h = np.maximum(h @ w.a.T, 0.0)
        return h


@dataclass
class ForwardTrace:
    """Per-layer activations and adapter caches from one forward pass."""

    x_in: np.ndarray
    x0: np.ndarray
    caches: list[LayerCache]
    x_out: np.ndarray
    logits: np.ndarray


class AdaptedModel:
    """Backbone wrapped with per-layer adapters and a trainable head."""

    def __init__(
        self,
        backbone: Backbone,
        stacks: list[AdapterStack],
        head: RealMatrix,
        config: AdapterConfig,
    ):
        if len(stacks) != backbone.n_layers:
            raise ShapeError(
                f"{len(stacks)} adapters for {backbone.n_layers} backbone layers"
            )
        if head.cols != backbone.d:
            raise ShapeError(f"head expects {head.cols} features, backbone yields {backbone.d}")
        self.backbone = backbone
        self.stacks = stacks
        self.head = head
        self.config = config

    @classmethod
    def init(
        cls, backbone: Backbone, config: AdapterConfig, k: int, rng: SeededRng
    ) -> "AdaptedModel":
        if config.d != backbone.d:
            raise ShapeError(f"adapter d={config.d} != backbone d={backbone.d}")
        stacks = [
            AdapterStack.init(config, w0, rng.split(f"layer{i}"))
            for i, w0 in enumerate(backbone.layers)
        ]
        head = RealMatrix.zeros(k, backbone.d)
        return cls(backbone, stacks, head, config)

    @property
    def n_classes(self) -> int:
        return self.head.rows

    @property
    def n_layers(self) -> int:
        return len(self.stacks)

    # -- parameter registry -------------------------------------------------

    def named_params(self) -> dict[str, RealMatrix]:
        params = {"head": self.head}
        for i, stack in enumerate(self.stacks):
            for name, value in stack.named_params().items():
                params[f"L{i}.{name}"] = value
        return params

    def theta_names(self) -> list[str]:
        names = ["head"]
        for i, stack in enumerate(self.stacks):
            names.extend(f"L{i}.{n}" for n in stack.theta_names())
        return names

    def phi_names(self) -> list[str]:
        names = []
        for i, stack in enumerate(self.stacks):
            names.extend(f"L{i}.{n}" for n in stack.phi_names())
        return names

    def get_param(self, name: str) -> RealMatrix:
        return self.named_params()[name]

    def set_param(self, name: str, value: RealMatrix) -> None:
        if name == "head":
            if value.shape != self.head.shape:
                raise ShapeError(f"head shape {self.head.shape} != new {value.shape}")
            self.head = value
            return
        layer, pname = name.split(".", 1)
        self.stacks[int(layer[1:])].set_param(pname, value)

    def snapshot(self, names: Sequence[str] | None = None) -> dict[str, RealMatrix]:
        params = self.named_params()
        keys = names if names is not None else list(params)
        return {k: params[k] for k in keys}

    def restore(self, snapshot: dict[str, RealMatrix]) -> None:
        for name, value in snapshot.items():
            self.set_param(name, value)

    # -- noise plumbing -----------------------------------------------------

    def draw_layer_eps(self, rng: SeededRng) -> list[Optional[RealMatrix]]:
        """One reparameterization draw per layer, variant-shaped."""
        out = []
        for stack in self.stacks:
            shape = stack.noise_shape()
            out.append(None if shape is None else RealMatrix(rng.normal(*shape)))
        return out

    def draw_shared_eps(self, rng: SeededRng) -> list[Optional[RealMatrix]]:
        """Per-batch shared noise for flipout; same shapes as draw_layer_eps."""
        return self.draw_layer_eps(rng)

    def draw_flipout(
        self, shared_eps: list[Optional[RealMatrix]], rng: SeededRng
    ) -> list[Optional[FlipoutNoise]]:
        """One per-example sign pair per layer around the shared noise."""
        out = []
        for stack, eps in zip(self.stacks, shared_eps):
            if eps is None:
                out.append(None)
            else:
                rows, cols = eps.shape
                out.append(FlipoutNoise(s=rng.signs(cols), t=rng.signs(rows), shared_eps=eps))
        return out

    def draw_dropout_masks(self, rng: SeededRng) -> Optional[list[np.ndarray]]:
        if self.config.dropout <= 0.0:
            return None
        return [
            dropout_mask(rng.split(f"drop{i}"), self.config.r, self.config.dropout)
            for i in range(self.n_layers)
        ]


def forward(
    model: AdaptedModel,
    x_in,
    mode: str = "mean",
    layer_eps: Sequence[Optional[RealMatrix]] | None = None,
    layer_noise: Sequence[Optional[FlipoutNoise]] | None = None,
    dropout_masks: Sequence[np.ndarray] | None = None,
    rng: SeededRng | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Full forward: logits plus the trace needed for backward.

    In "sample" mode, per-layer noise comes from `layer_eps` or is drawn
    from `rng`; "flipout" analogously with `layer_noise`. Dropout (the
    MC-dropout baseline) is active in stochastic modes only, so "mean"
    stays deterministic for every variant.
    """
    xv = np.asarray(x_in, dtype=np.float64).reshape(-1)
    if xv.shape[0] != model.backbone.d_in:
        raise ShapeError(f"input length {xv.shape[0]} != d_in={model.backbone.d_in}")
    if mode not in ("mean", "sample", "flipout"):
        raise ValueError(f"unknown mode {mode!r}")

    if mode == "sample" and layer_eps is None:
        if rng is None:
            raise ValueError("mode='sample' requires layer_eps or rng")
        layer_eps = model.draw_layer_eps(rng)
    if mode == "flipout" and layer_noise is None:
        if rng is None:
            raise ValueError("mode='flipout' requires layer_noise or rng")
        layer_noise = model.draw_flipout(model.draw_shared_eps(rng.split("eps")), rng.split("signs"))
    if mode != "mean" and model.config.dropout > 0.0 and dropout_masks is None:
        if rng is None:
            raise ValueError("dropout is configured; provide dropout_masks or rng")
        dropout_masks = model.draw_dropout_masks(rng.split("dropout"))

    x0 = model.backbone.emb.a @ xv
    if not np.all(np.isfinite(x0)):
        raise NumericError("non-finite activation at the embedding")
    x = x0
    caches = []
    for l, stack in enumerate(model.stacks):
        res = adapter_forward(
            stack,
            x,
            mode=mode,
            eps=None if layer_eps is None else layer_eps[l],
            noise=None if layer_noise is None else layer_noise[l],
            dropout_mask=None if dropout_masks is None else dropout_masks[l],
        )
        x = np.maximum(res.h, 0.0)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activation at layer {l + 1}")
        caches.append(res.cache)
    logits = model.head.a @ x
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits at the head")
    return logits, ForwardTrace(x_in=xv, x0=x0, caches=caches, x_out=x, logits=logits)


def nll_from_logits(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Per-example negative log-likelihood and its logit gradient."""
    z = logits - logits.max()
    lse = math.log(np.exp(z).sum())
    p = np.exp(z - lse)
    g = p.copy()
    g[label] -= 1.0
    return lse - z[label], g


def backward_example(
    model: AdaptedModel,
    trace: ForwardTrace,
    label: int,
    grads_nll: GradBuffer,
    grads_kl: GradBuffer | None = None,
    kl_seeds: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    kl_into_theta: bool = False,
    scale: float = 1.0,
) -> float:
    """Accumulate one example's gradients into the two channels.

    Returns the example's NLL. `kl_seeds[l]` carries d/d(mu, omega) of this
    example's (already scaled) layer-l divergence; the KL channel re-walks
    the same trace so contextual seeds propagate into earlier layers.
    """
    if not 0 <= label < model.n_classes:
        raise IndexError(f"label {label} out of range [0, {model.n_classes})")
    nll, g_logits = nll_from_logits(trace.logits, label)
    grads_nll.add("head", np.outer(g_logits, trace.x_out), scale)
    g_x = model.head.a.T @ g_logits
    for l in reversed(range(model.n_layers)):
        cache = trace.caches[l]
        g_pre = g_x * (cache.pre > 0.0)
        g_x = adapter_backward(
            model.stacks[l], cache, g_pre, grads_nll, f"L{l}.", scale, into_theta=True
        )

    if kl_seeds is not None and grads_kl is not None:
        g_x = np.zeros(model.backbone.d)
        for l in reversed(range(model.n_layers)):
            cache = trace.caches[l]
            g_pre = g_x * (cache.pre > 0.0)
            g_x = adapter_backward(
                model.stacks[l],
                cache,
                g_pre,
                grads_kl,
                f"L{l}.",
                scale,
                into_theta=kl_into_theta,
                kl_seed=kl_seeds[l],
            )
    return nll


def predictive(
    model: AdaptedModel, x_in, m: int, rng: SeededRng | None = None
) -> np.ndarray:
    """Monte-Carlo posterior predictive over classes.

    m = 0 evaluates the posterior mean directly; m >= 1 averages the
    softmax over m independent sampled forwards.
    """
    if m < 0:
        raise ValueError(f"sample count must be >= 0, got {m}")
    if m == 0:
        logits, _ = forward(model, x_in, mode="mean")
        return softmax_rows(logits.reshape(1, -1))[0]
    if rng is None:
        raise ValueError("m >= 1 requires an rng")
    acc = np.zeros(model.n_classes)
    for i in range(m):
        draw_rng = rng.split(f"draw{i}")
        logits, _ = forward(model, x_in, mode="sample", rng=draw_rng)
        acc += softmax_rows(logits.reshape(1, -1))[0]
    return acc / m


def predictive_logit_draws(
    model: AdaptedModel, x_in, m: int, rng: SeededRng | None = None
) -> np.ndarray:
    """Stacked per-draw logits, shape (max(m,1), K); m=0 gives mean logits.

    Used where post-hoc temperature must scale each draw's logits before
    probabilities are averaged.
    """
    if m < 0:
        raise ValueError(f"sample count must be >= 0, got {m}")
    if m == 0:
        logits, _ = forward(model, x_in, mode="mean")
        return logits.reshape(1, -1)
    if rng is None:
        raise ValueError("m >= 1 requires an rng")
    rows = []
    for i in range(m):
        draw_rng = rng.split(f"draw{i}")
        logits, _ = forward(model, x_in, mode="sample", rng=draw_rng)
        rows.append(logits)
    return np.stack(rows)


# -- backbone pretraining ----------------------------------------------------


@dataclass
class BackboneConfig:
    """Geometry and training budget for the frozen feature extractor."""

    d_in: int = 16
    d: int = 32
    layers: int = 4
    steps: int = 4000
    batch_size: int = 64
    lr: float = 3e-3
    target_accuracy: float = 0.90
    eval_every: int = 200

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("backbone needs at least one layer")


def _mlp_forward(emb, ws, head, x_batch):
    hs = [x_batch @ emb.T]
    for w in ws:
        hs.append(np.maximum(hs[-1] @ w.T, 0.0))
    return hs[-1] @ head.T, hs


def _source_accuracy(emb, ws, head, x, y):
    logits, _ = _mlp_forward(emb, ws, head, x)
    return float(np.mean(logits.argmax(axis=1) == y))


def pretrain_backbone(
    config: BackboneConfig, source_x: np.ndarray, source_y: np.ndarray, rng: SeededRng
) -> Backbone:
    """Train embedding + hidden layers on the abundant source task, freeze.

    The classifier head used here is discarded. Raises PretrainError with
    the final accuracy if the target is not reached within the step budget.
    """
    n, d_in = source_x.shape
    if d_in != config.d_in:
        raise ShapeError(f"source has {d_in} features, config expects {config.d_in}")
    k = int(source_y.max()) + 1
    init = rng.split("init")
    emb = init.split("emb").normal(config.d, config.d_in) / math.sqrt(d_in)
    ws = [
        init.split(f"w{i}").normal(config.d, config.d) * math.sqrt(2.0 / config.d)
        for i in range(config.layers)
    ]
    head = np.zeros((k, config.d))

    opt = AdamW(lr=config.lr)
    names = ["emb"] + [f"w{i}" for i in range(config.layers)] + ["head"]
    batch_rng = rng.split("batches")
    accuracy = _source_accuracy(emb, ws, head, source_x, source_y)
    for step in range(1, config.steps + 1):
        idx = batch_rng.integers(0, n, config.batch_size)
        xb, yb = source_x[idx], source_y[idx]
        logits, hs = _mlp_forward(emb, ws, head, xb)
        g = softmax_rows(logits)
        g[np.arange(len(yb)), yb] -= 1.0
        g /= len(yb)

        grads = GradBuffer()
        grads.add("head", g.T @ hs[-1])
        gx = g @ head
        for i in reversed(range(config.layers)):
            gpre = gx * (hs[i + 1] > 0.0)
            grads.add(f"w{i}", gpre.T @ hs[i])
            gx = gpre @ ws[i]
        grads.add("emb", gx.T @ xb)

        values = {"emb": RealMatrix(emb), "head": RealMatrix(head)}
        values.update({f"w{i}": RealMatrix(ws[i]) for i in range(config.layers)})
        updated = opt.step(values, grads, names)
        emb = updated["emb"].a
        head = updated["head"].a
        ws = [updated[f"w{i}"].a for i in range(config.layers)]

        if step % config.eval_every == 0:
            accuracy = _source_accuracy(emb, ws, head, source_x, source_y)
            if accuracy >= config.target_accuracy:
                break

    accuracy = _source_accuracy(emb, ws, head, source_x, source_y)
    if accuracy < config.target_accuracy:
        raise PretrainError(
            f"backbone reached {accuracy:.4f} source accuracy, "
            f"target {config.target_accuracy:.4f}, within {config.steps} steps"
        )
    return Backbone(
        emb=RealMatrix(emb),
        layers=[RealMatrix(w) for w in ws],
        source_accuracy=accuracy,
    )
