"""Per-layer adapter variants over a frozen weight matrix.

All variants share the factorization h = W0 x + (alpha/r) * B * E * (A x)
with a d-by-r factor B and an r-by-d factor A:

  map   - deterministic trainable r-by-r core E (identity-initialized)
  blob  - Gaussian mean-field posterior over A itself; E is absent
  de    - diagonal E with a free Gaussian posterior over its r entries
  fe    - full r-by-r E with a free entrywise Gaussian posterior
  clora - full E whose posterior (mu, omega) is predicted per input by a
          small two-layer inference network fed with z = A x

Free posteriors store std as a pre-sigmoid parameter `rho` so every variant
shares the contextual head's (0, 1) std range. Backward passes are
hand-derived and accumulate into a GradBuffer under a caller-supplied name
prefix; they support a separate KL gradient channel seeded at (mu, omega).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import GradBuffer, RealMatrix, ShapeError, SeededRng, _sigmoid_array
from .variational import DiagonalGaussian, FlipoutNoise


class Variant(str, enum.Enum):
    MAP = "map"
    BLOB = "blob"
    DE = "de"
    FE = "fe"
    CLORA = "clora"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, Variant):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class AdapterConfig:
    """Shapes and variant selection for one experiment's adapters."""

    d: int
    r: int = 8
    alpha: float = 16.0
    hidden_c: int = 64
    variant: Variant = Variant.CLORA
    dropout: float = 0.0
    omega_init: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.r < 1:
            raise ValueError(f"rank must be >= 1, got {self.r}")
        if 2 * self.r > self.d:
            raise ValueError(f"low-rank contract requires r <= d/2, got r={self.r}, d={self.d}")
        if self.hidden_c < 1:
            raise ValueError(f"hidden width must be >= 1, got {self.hidden_c}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.omega_init < 1.0:
            raise ValueError(f"omega_init must lie in (0, 1), got {self.omega_init}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def rho_init(self) -> float:
        """Pre-sigmoid value whose sigmoid equals omega_init."""
        return math.log(self.omega_init / (1.0 - self.omega_init))


@dataclass
class LoraFactors:
    """Low-rank update factors; B starts at zero so the initial update is zero."""

    b: RealMatrix
    a: RealMatrix

    @classmethod
    def init(cls, config: AdapterConfig, rng: SeededRng) -> "LoraFactors":
        a = RealMatrix(rng.normal(config.r, config.d) / math.sqrt(config.r))
        return cls(b=RealMatrix.zeros(config.d, config.r), a=a)


@dataclass
class ContextualModule:
    """Two-layer inference network: r inputs, C hidden units, 2*r^2 outputs.

    The first r^2 outputs are the posterior mean (no activation); the second
    r^2 pass through a sigmoid to give the posterior std in (0, 1).
    """

    w1: RealMatrix
    b1: RealMatrix
    w2: RealMatrix
    b2: RealMatrix

    @classmethod
    def init(cls, config: AdapterConfig, rng: SeededRng) -> "ContextualModule":
        r, c = config.r, config.hidden_c
        w1 = RealMatrix(rng.normal(c, r) * math.sqrt(2.0 / r))
        b1 = RealMatrix.zeros(c, 1)
        w2 = RealMatrix(rng.normal(2 * r * r, c) * 0.01)
        # Mean head starts at the identity core, std head at omega_init.
        b2 = np.concatenate([np.eye(r).reshape(-1), np.full(r * r, config.rho_init)])
        return cls(w1=w1, b1=b1, w2=w2, b2=RealMatrix.column(b2))

    def param_count(self) -> int:
        return self.w1.a.size + self.b1.a.size + self.w2.a.size + self.b2.a.size


@dataclass
class ContextCache:
    """Intermediates of one contextual-module forward, kept for backward."""

    z: np.ndarray        # (r,) raw input
    a1: np.ndarray       # (C,) hidden pre-activation
    hid: np.ndarray      # (C,)
    mu: np.ndarray       # (r, r)
    omega: np.ndarray    # (r, r)
    rho_active: np.ndarray  # (r, r) clamp mask on the std head


# Crash guard on the predicted pre-sigmoid std: sigmoid underflows to exactly
# zero near -746, which would zero a posterior std. Any run operating this far
# out has already diverged, so the clamp never binds in healthy training.
RHO_CLAMP = 600.0


def context_forward(module: ContextualModule, z) -> tuple[DiagonalGaussian, ContextCache]:
    """Map z = A x to the per-input posterior parameters (mu, omega)."""
    zv = np.asarray(z, dtype=np.float64).reshape(-1)
    r2 = module.b2.rows // 2
    r = int(math.isqrt(r2))
    if zv.shape[0] != module.w1.cols:
        raise ShapeError(f"context input length {zv.shape[0]} != expected {module.w1.cols}")
    a1 = module.w1.a @ zv + module.b1.ravel()
    hid = np.maximum(a1, 0.0)
    out = module.w2.a @ hid + module.b2.ravel()
    mu = out[:r2].reshape(r, r)
    rho_raw = out[r2:].reshape(r, r)
    rho_active = np.abs(rho_raw) < RHO_CLAMP
    omega = _sigmoid_array(np.clip(rho_raw, -RHO_CLAMP, RHO_CLAMP))
    cache = ContextCache(z=zv, a1=a1, hid=hid, mu=mu, omega=omega, rho_active=rho_active)
    return DiagonalGaussian(RealMatrix(mu), RealMatrix(omega)), cache


def context_backward(
    module: ContextualModule,
    cache: ContextCache,
    g_mu: np.ndarray,
    g_omega: np.ndarray,
    grads: GradBuffer,
    prefix: str,
    scale: float = 1.0,
) -> np.ndarray:
    """Backward through the inference network; returns the gradient w.r.t. z."""
    g_rho = g_omega * cache.omega * (1.0 - cache.omega) * cache.rho_active
    g_out = np.concatenate([g_mu.reshape(-1), g_rho.reshape(-1)])
    grads.add(prefix + "ctx.w2", np.outer(g_out, cache.hid), scale)
    grads.add(prefix + "ctx.b2", g_out.reshape(-1, 1), scale)
    g_hid = module.w2.a.T @ g_out
    g_a1 = g_hid * (cache.a1 > 0.0)
    grads.add(prefix + "ctx.w1", np.outer(g_a1, cache.z), scale)
    grads.add(prefix + "ctx.b1", g_a1.reshape(-1, 1), scale)
    return module.w1.a.T @ g_a1


@dataclass
class AdapterStack:
    """One layer's frozen weight plus its variant-specific trainable state."""

    config: AdapterConfig
    w0: RealMatrix
    factors: LoraFactors
    e_map: Optional[RealMatrix] = None       # map: deterministic core
    mu: Optional[RealMatrix] = None          # de: (r,1); fe: (r,r)
    rho: Optional[RealMatrix] = None         # pre-sigmoid std, matching mu
    ctx: Optional[ContextualModule] = None   # clora
    mu_a: Optional[RealMatrix] = None        # blob: (r,d)
    rho_a: Optional[RealMatrix] = None

    @classmethod
    def init(cls, config: AdapterConfig, w0: RealMatrix, rng: SeededRng) -> "AdapterStack":
        if w0.shape != (config.d, config.d):
            raise ShapeError(f"frozen weight shape {w0.shape} != ({config.d}, {config.d})")
        r = config.r
        stack = cls(config=config, w0=w0, factors=LoraFactors.init(config, rng.split("factors")))
        v = config.variant
        if v is Variant.MAP:
            stack.e_map = RealMatrix.identity(r)
        elif v is Variant.DE:
            stack.mu = RealMatrix(np.ones((r, 1)))
            stack.rho = RealMatrix(np.full((r, 1), config.rho_init))
        elif v is Variant.FE:
            stack.mu = RealMatrix.identity(r)
            stack.rho = RealMatrix(np.full((r, r), config.rho_init))
        elif v is Variant.CLORA:
            stack.ctx = ContextualModule.init(config, rng.split("ctx"))
        elif v is Variant.BLOB:
            stack.mu_a = RealMatrix(rng.normal(r, config.d) / math.sqrt(r))
            stack.rho_a = RealMatrix(np.full((r, config.d), config.rho_init))
        return stack

    def named_params(self) -> dict[str, RealMatrix]:
        params = {"B": self.factors.b}
        if self.config.variant is not Variant.BLOB:
            params["A"] = self.factors.a
        if self.e_map is not None:
            params["e_map"] = self.e_map
        if self.mu is not None:
            params["mu"] = self.mu
            params["rho"] = self.rho
        if self.ctx is not None:
            params.update(
                {
                    "ctx.w1": self.ctx.w1,
                    "ctx.b1": self.ctx.b1,
                    "ctx.w2": self.ctx.w2,
                    "ctx.b2": self.ctx.b2,
                }
            )
        if self.mu_a is not None:
            params["mu_a"] = self.mu_a
            params["rho_a"] = self.rho_a
        return params

    def theta_names(self) -> list[str]:
        names = ["B"]
        if self.config.variant is not Variant.BLOB:
            names.append("A")
        if self.config.variant is Variant.MAP:
            names.append("e_map")
        return names

    def phi_names(self) -> list[str]:
        v = self.config.variant
        if v in (Variant.DE, Variant.FE):
            return ["mu", "rho"]
        if v is Variant.CLORA:
            return ["ctx.w1", "ctx.b1", "ctx.w2", "ctx.b2"]
        if v is Variant.BLOB:
            return ["mu_a", "rho_a"]
        return []

    def set_param(self, name: str, value: RealMatrix) -> None:
        current = self.named_params()[name]
        if current.shape != value.shape:
            raise ShapeError(f"parameter {name!r} shape {current.shape} != new {value.shape}")
        if name == "B":
            self.factors.b = value
        elif name == "A":
            self.factors.a = value
        elif name == "e_map":
            self.e_map = value
        elif name == "mu":
            self.mu = value
        elif name == "rho":
            self.rho = value
        elif name == "mu_a":
            self.mu_a = value
        elif name == "rho_a":
            self.rho_a = value
        elif name.startswith("ctx."):
            setattr(self.ctx, name.split(".", 1)[1], value)
        else:
            raise KeyError(name)

    def noise_shape(self) -> tuple[int, int] | None:
        """Shape of the Gaussian noise this variant's posterior consumes."""
        v = self.config.variant
        r, d = self.config.r, self.config.d
        if v is Variant.MAP:
            return None
        if v is Variant.DE:
            return (r, 1)
        if v is Variant.BLOB:
            return (r, d)
        return (r, r)

    def posterior_entry_count(self) -> int:
        v = self.config.variant
        r, d = self.config.r, self.config.d
        return {Variant.MAP: 0, Variant.DE: r, Variant.FE: r * r, Variant.BLOB: r * d}.get(
            v, r * r
        )


@dataclass
class LayerCache:
    """Everything one adapter forward needs to replay its backward pass."""

    x_prev: np.ndarray                   # (d,)
    z: np.ndarray                        # (r,) raw A x (blob: sampled-A x)
    z_used: np.ndarray                   # (r,) z after dropout, feeding the core
    dropout_mask: Optional[np.ndarray]   # (r,) scaled mask or None
    mu: Optional[np.ndarray]             # posterior mean as used (variant shape)
    omega: Optional[np.ndarray]          # posterior std as used
    noise: Optional[np.ndarray]          # effective eps multiplier on omega
    e_used: np.ndarray                   # (r,r) core, or (r,d) sampled A for blob
    u: np.ndarray                        # (r,) core output feeding B
    pre: np.ndarray                      # (d,) layer output before activation
    ctx: Optional[ContextCache] = None


@dataclass
class AdapterForward:
    h: np.ndarray
    z: np.ndarray
    e_used: np.ndarray
    cache: LayerCache


def _resolve_noise(stack: AdapterStack, mode: str, eps, noise) -> Optional[np.ndarray]:
    """Effective noise multiplier n with core = mu + omega * n."""
    shape = stack.noise_shape()
    if shape is None:
        return None
    if mode == "mean":
        return np.zeros(shape)
    if mode == "sample":
        if eps is None:
            raise ValueError("mode='sample' requires eps")
        e = eps.a if isinstance(eps, RealMatrix) else np.asarray(eps, dtype=np.float64)
        e = e.reshape(shape)
        return e
    if mode == "flipout":
        if noise is None:
            raise ValueError("mode='flipout' requires noise")
        if noise.shared_eps.shape != shape:
            raise ShapeError(f"flipout eps shape {noise.shared_eps.shape} != expected {shape}")
        return noise.shared_eps.a * noise.outer_signs()
    raise ValueError(f"unknown mode {mode!r}")


def adapter_forward(
    stack: AdapterStack,
    x,
    mode: str = "mean",
    eps: RealMatrix | np.ndarray | None = None,
    noise: FlipoutNoise | None = None,
    dropout_mask: np.ndarray | None = None,
) -> AdapterForward:
    """One adapted layer, pre-activation: h = W0 x + (alpha/r) B E (A x).

    `mode` selects the core: "mean" uses the posterior mean, "sample" the
    reparameterized draw mu + omega * eps, "flipout" the sign-decorrelated
    draw. The map variant is deterministic in every mode; blob samples A
    itself instead of a core E.
    """
    cfg = stack.config
    xv = np.asarray(x, dtype=np.float64).reshape(-1)
    if xv.shape[0] != cfg.d:
        raise ShapeError(f"input length {xv.shape[0]} != d={cfg.d}")
    n_eff = _resolve_noise(stack, mode, eps, noise)
    v = cfg.variant
    ctx_cache = None
    mu = omega = None

    if v is Variant.BLOB:
        mu = stack.mu_a.a
        omega = _sigmoid_array(stack.rho_a.a)
        a_eff = mu + omega * n_eff
        z = a_eff @ xv
        z_used, mask = z, None
        e_used, u = a_eff, z
    else:
        z = stack.factors.a.a @ xv
        if dropout_mask is not None:
            mask = np.asarray(dropout_mask, dtype=np.float64).reshape(-1)
            z_used = z * mask
        else:
            mask, z_used = None, z
        if v is Variant.MAP:
            e_used = stack.e_map.a
        elif v is Variant.DE:
            mu = stack.mu.ravel()
            omega = _sigmoid_array(stack.rho.ravel())
            diag = mu + omega * n_eff.reshape(-1)
            e_used = np.diag(diag)
        elif v is Variant.FE:
            mu = stack.mu.a
            omega = _sigmoid_array(stack.rho.a)
            e_used = mu + omega * n_eff
        else:  # clora: posterior parameters are predicted from z
            gauss, ctx_cache = context_forward(stack.ctx, z)
            mu, omega = ctx_cache.mu, ctx_cache.omega
            e_used = mu + omega * n_eff
        u = e_used @ z_used

    h = stack.w0.a @ xv + cfg.scaling * (stack.factors.b.a @ u)
    cache = LayerCache(
        x_prev=xv,
        z=z,
        z_used=z_used,
        dropout_mask=mask,
        mu=mu,
        omega=omega,
        noise=n_eff,
        e_used=e_used,
        u=u,
        pre=h,
        ctx=ctx_cache,
    )
    return AdapterForward(h=h, z=z, e_used=e_used, cache=cache)


def adapter_backward(
    stack: AdapterStack,
    cache: LayerCache,
    g_pre: np.ndarray,
    grads: GradBuffer,
    prefix: str,
    scale: float = 1.0,
    into_theta: bool = True,
    kl_seed: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Backward through one adapted layer; returns the gradient w.r.t. x.

    `g_pre` is the upstream gradient w.r.t. the pre-activation output.
    Posterior parameters always receive gradients; the deterministic factors
    (B, A, map core) only when `into_theta` is set, which is how the KL
    gradient channel is kept out of the supervised parameters during
    training while remaining available for full-gradient audits.
    `kl_seed`, when given, injects (d/dmu, d/domega) contributions at this
    layer's posterior output, already carrying any KL scaling.
    """
    cfg = stack.config
    s_lr = cfg.scaling
    v = cfg.variant

    if v is Variant.BLOB:
        g_z = s_lr * (stack.factors.b.a.T @ g_pre)
        if into_theta:
            grads.add(prefix + "B", s_lr * np.outer(g_pre, cache.u), scale)
        g_a_eff = np.outer(g_z, cache.x_prev)
        g_mu = g_a_eff.copy()
        g_omega = g_a_eff * cache.noise
        if kl_seed is not None:
            g_mu += kl_seed[0]
            g_omega += kl_seed[1]
        grads.add(prefix + "mu_a", g_mu, scale)
        grads.add(prefix + "rho_a", g_omega * cache.omega * (1.0 - cache.omega), scale)
        return stack.w0.a.T @ g_pre + cache.e_used.T @ g_z

    g_u = s_lr * (stack.factors.b.a.T @ g_pre)
    if into_theta:
        grads.add(prefix + "B", s_lr * np.outer(g_pre, cache.u), scale)

    g_z_ctx = None
    if v is Variant.MAP:
        if into_theta:
            grads.add(prefix + "e_map", np.outer(g_u, cache.z_used), scale)
        g_z_used = stack.e_map.a.T @ g_u
    elif v is Variant.DE:
        g_diag = g_u * cache.z_used
        g_mu = g_diag.copy()
        g_omega = g_diag * cache.noise.reshape(-1)
        if kl_seed is not None:
            g_mu += kl_seed[0].reshape(-1)
            g_omega += kl_seed[1].reshape(-1)
        grads.add(prefix + "mu", g_mu.reshape(-1, 1), scale)
        grads.add(
            prefix + "rho",
            (g_omega * cache.omega * (1.0 - cache.omega)).reshape(-1, 1),
            scale,
        )
        g_z_used = np.diag(cache.e_used) * g_u
    else:
        g_e = np.outer(g_u, cache.z_used)
        g_mu = g_e.copy()
        g_omega = g_e * cache.noise
        if kl_seed is not None:
            g_mu += kl_seed[0]
            g_omega += kl_seed[1]
        if v is Variant.FE:
            grads.add(prefix + "mu", g_mu, scale)
            grads.add(prefix + "rho", g_omega * cache.omega * (1.0 - cache.omega), scale)
        else:  # clora
            g_z_ctx = context_backward(stack.ctx, cache.ctx, g_mu, g_omega, grads, prefix, scale)
        g_z_used = cache.e_used.T @ g_u

    g_z = g_z_used * cache.dropout_mask if cache.dropout_mask is not None else g_z_used
    if g_z_ctx is not None:
        g_z = g_z + g_z_ctx
    if into_theta:
        grads.add(prefix + "A", np.outer(g_z, cache.x_prev), scale)
    return stack.w0.a.T @ g_pre + stack.factors.a.a.T @ g_z


def stochastic_param_count(config: AdapterConfig) -> int:
    """Number of parameters governing the stochastic core, by variant.

    The clora count depends only on (r, C), never on d; blob scales
    linearly in d.
    """
    r, c, d = config.r, config.hidden_c, config.d
    v = config.variant
    if v is Variant.MAP:
        return 0
    if v is Variant.DE:
        return 2 * r
    if v is Variant.FE:
        return 2 * r * r
    if v is Variant.BLOB:
        return 2 * r * d
    return c * r + c + 2 * r * r * c + 2 * r * r


def dropout_mask(rng: SeededRng, r: int, rate: float) -> np.ndarray:
    """Inverted dropout mask: entries are 0 or 1/(1-rate)."""
    keep = rng.uniform(r, 1).reshape(-1) >= rate
    return keep / (1.0 - rate)
