"""Gaussian variational machinery.

Diagonal Gaussian posteriors over a matrix of weights, closed-form KL to a
fixed isotropic Gaussian prior (with the sampled log-ratio estimator kept
around for audits), reparameterized sampling, and flipout perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RealMatrix, ShapeError


@dataclass(frozen=True)
class DiagonalGaussian:
    """Entrywise-independent Gaussian over a matrix: N(mu, omega^2).

    `omega` holds standard deviations directly (not log-std); when produced
    by a sigmoid head its entries lie in (0, 1].
    """

    mu: RealMatrix
    omega: RealMatrix

    def __post_init__(self):
        if self.mu.shape != self.omega.shape:
            raise ShapeError(f"mu shape {self.mu.shape} != omega shape {self.omega.shape}")
        if np.any(self.omega.a <= 0.0):
            raise ValueError("omega entries must be strictly positive")


@dataclass(frozen=True)
class FixedPrior:
    """Zero-mean isotropic Gaussian prior N(0, sigma_p^2), shared entrywise."""

    sigma_p: float = 1.0

    def __post_init__(self):
        if not self.sigma_p > 0.0:
            raise ValueError(f"sigma_p must be positive, got {self.sigma_p}")


@dataclass(frozen=True)
class FlipoutNoise:
    """Shared Gaussian noise plus one per-example pair of sign vectors.

    `t` flips rows, `s` flips columns: the perturbation applied to the mean
    is (shared_eps * omega) * outer(t, s). One (s, t) pair per example, one
    shared_eps per mini-batch.
    """

    s: np.ndarray
    t: np.ndarray
    shared_eps: RealMatrix

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64).reshape(-1)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if not np.all(np.abs(s) == 1.0) or not np.all(np.abs(t) == 1.0):
            raise ValueError("sign vectors must contain only -1 and +1")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "t", t)
        if self.shared_eps.shape != (t.shape[0], s.shape[0]):
            raise ShapeError(
                f"shared_eps shape {self.shared_eps.shape} != (len(t), len(s)) = "
                f"({t.shape[0]}, {s.shape[0]})"
            )

    def outer_signs(self) -> np.ndarray:
        return np.outer(self.t, self.s)


@dataclass(frozen=True)
class KlResult:
    value: float
    grad_mu: RealMatrix
    grad_omega: RealMatrix


def kl_to_prior(q: DiagonalGaussian, p: FixedPrior) -> KlResult:
    """Closed-form KL(q || p) summed over entries, with analytic gradients.

    Per entry: log(sigma_p/omega) + (omega^2 + mu^2) / (2 sigma_p^2) - 1/2.
    Gradients: d/dmu = mu / sigma_p^2, d/domega = -1/omega + omega / sigma_p^2.
    """
    mu, omega, sp = q.mu.a, q.omega.a, p.sigma_p
    value = float(np.sum(np.log(sp / omega) + (omega**2 + mu**2) / (2.0 * sp**2) - 0.5))
    grad_mu = mu / sp**2
    grad_omega = -1.0 / omega + omega / sp**2
    return KlResult(value, RealMatrix(grad_mu), RealMatrix(grad_omega))


def kl_sampled(q: DiagonalGaussian, p: FixedPrior, eps: RealMatrix) -> KlResult:
    """Single-sample log-ratio estimator log q(E)/p(E) at E = mu + omega*eps.

    Pathwise gradients through E. Its expectation over eps equals the closed
    form, as do the expected gradients; kept for auditing the estimator the
    closed form replaces.
    """
    if eps.shape != q.mu.shape:
        raise ShapeError(f"eps shape {eps.shape} != posterior shape {q.mu.shape}")
    mu, omega, sp, e = q.mu.a, q.omega.a, p.sigma_p, eps.a
    sample = mu + omega * e
    value = float(np.sum(np.log(sp / omega) - 0.5 * e**2 + sample**2 / (2.0 * sp**2)))
    grad_mu = sample / sp**2
    grad_omega = -1.0 / omega + sample * e / sp**2
    return KlResult(value, RealMatrix(grad_mu), RealMatrix(grad_omega))


def reparam_sample(q: DiagonalGaussian, eps: RealMatrix) -> RealMatrix:
    """mu + omega * eps. Pathwise: dE/dmu = 1, dE/domega = eps."""
    if eps.shape != q.mu.shape:
        raise ShapeError(f"eps shape {eps.shape} != posterior shape {q.mu.shape}")
    return RealMatrix(q.mu.a + q.omega.a * eps.a)


def flipout_perturb(q: DiagonalGaussian, noise: FlipoutNoise) -> RealMatrix:
    """Per-example pseudo-independent sample mu + (eps * omega) * outer(t, s).

    Sign flips preserve the entrywise marginals of `reparam_sample`; with
    all-ones sign vectors this reduces to reparam_sample(q, shared_eps).
    """
    if noise.shared_eps.shape != q.mu.shape:
        raise ShapeError(
            f"flipout noise shape {noise.shared_eps.shape} != posterior shape {q.mu.shape}"
        )
    perturb = noise.shared_eps.a * q.omega.a * noise.outer_signs()
    return RealMatrix(q.mu.a + perturb)
