"""Bivariate Gaussian heads, their NLL, sampling and aleatoric+epistemic fusion.

A head is 5 raw network outputs ``(mu1, mu2, s1, s2, r)`` read as
``sigma_i = exp(s_i)`` and ``rho = clip(tanh(r), -0.999, 0.999)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import ContractError, Node, NumericError

RHO_MAX = 0.999
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Gauss2D:
    """Batched bivariate Gaussian; leading axes are free, last axis is the pair."""

    mu: np.ndarray  # (..., 2)
    log_sigma: np.ndarray  # (..., 2)
    corr_raw: np.ndarray  # (...)

    @classmethod
    def from_head(cls, out: np.ndarray, offset: int = 0) -> "Gauss2D":
        out = np.asarray(out, dtype=np.float64)
        return cls(
            out[..., offset : offset + 2].copy(),
            out[..., offset + 2 : offset + 4].copy(),
            out[..., offset + 4].copy(),
        )

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def rho(self) -> np.ndarray:
        return np.clip(np.tanh(self.corr_raw), -RHO_MAX, RHO_MAX)

    @property
    def variance(self) -> np.ndarray:
        return np.exp(2.0 * self.log_sigma)

    def covariance(self) -> np.ndarray:
        s1, s2 = self.sigma[..., 0], self.sigma[..., 1]
        c = self.rho * s1 * s2
        return np.stack([np.stack([s1 * s1, c], -1), np.stack([c, s2 * s2], -1)], -2)

    def cholesky(self) -> np.ndarray:
        return cholesky_factor(self.sigma, self.rho)

    def shifted(self, c) -> "Gauss2D":
        return Gauss2D(self.mu + c, self.log_sigma.copy(), self.corr_raw.copy())


@dataclass
class FusedGaussian:
    mean: np.ndarray
    variance: np.ndarray
    epistemic: np.ndarray
    aleatoric: np.ndarray


# ---------------------------------------------------------------- graph losses


def nll_rows(y, out: Node, offset: int = 0) -> Node:
    """Per-row bivariate NLL, shape ``(N, 1)``, including the log(2*pi) constant.

    ``out`` holds raw head outputs; columns ``offset:offset+5`` form the head.
    """
    y = y if isinstance(y, Node) else nd.const(y)
    if not np.isfinite(y.value).all():
        raise NumericError("nll: non-finite observation")
    mu = nd.slice_(out, offset, offset + 2)
    s = nd.slice_(out, offset + 2, offset + 4)
    r = nd.slice_(out, offset + 4, offset + 5)
    z = nd.mul(nd.sub(y, mu), nd.exp(nd.scale(s, -1.0)))
    zz = nd.square(z)
    z1, z2 = nd.slice_(z, 0, 1), nd.slice_(z, 1, 2)
    rho = nd.clip(nd.tanh(r), -RHO_MAX, RHO_MAX)
    log_omr = nd.log(nd.sub(nd.const(np.ones(rho.shape)), nd.square(rho)))
    quad = nd.sub(nd.add(nd.slice_(zz, 0, 1), nd.slice_(zz, 1, 2)), nd.scale(nd.mul(rho, nd.mul(z1, z2)), 2.0))
    log_det = nd.add(nd.add(nd.slice_(s, 0, 1), nd.slice_(s, 1, 2)), nd.scale(log_omr, 0.5))
    maha = nd.scale(nd.mul(quad, nd.exp(nd.scale(log_omr, -1.0))), 0.5)
    return nd.add(nd.add(log_det, maha), nd.const(np.full(rho.shape, LOG_2PI)))


def sq_err_rows(y, out: Node, offset: int = 0) -> Node:
    """Per-row squared error of the head mean, averaged over the pair: ``(N, 1)``."""
    y = y if isinstance(y, Node) else nd.const(y)
    d = nd.square(nd.sub(y, nd.slice_(out, offset, offset + 2)))
    return nd.scale(nd.add(nd.slice_(d, 0, 1), nd.slice_(d, 1, 2)), 0.5)


def masked_mean(rows: Node, mask: np.ndarray | None = None) -> Node:
    if mask is None:
        return nd.mean(rows)
    mask = np.asarray(mask, dtype=np.float64).reshape(rows.shape)
    count = mask.sum()
    if count == 0:
        return nd.scale(nd.sum_(nd.mul(rows, nd.const(mask))), 0.0)
    return nd.scale(nd.sum_(nd.mul(rows, nd.const(mask))), 1.0 / count)


def nll(y, g: Gauss2D) -> np.ndarray:
    """-log N(y; mu, Sigma) for every leading index of ``g``."""
    y = np.asarray(y, dtype=np.float64)
    if not np.isfinite(y).all():
        raise NumericError("nll: non-finite observation")
    lead = g.mu.shape[:-1]
    head = np.concatenate([g.mu, g.log_sigma, g.corr_raw[..., None]], axis=-1).reshape(-1, 5)
    with nd.no_grad():
        rows = nll_rows(np.broadcast_to(y, g.mu.shape).reshape(-1, 2), nd.const(head))
    out = rows.value.reshape(lead)
    return out if lead else out.item()


# ---------------------------------------------------------------- sampling


def cholesky_factor(sigma: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor ``[[s1, 0], [rho*s2, s2*sqrt(1-rho^2)]]``."""
    s1, s2, rho = np.broadcast_arrays(sigma[..., 0], sigma[..., 1], rho)
    zero = np.zeros_like(s1)
    return np.stack(
        [np.stack([s1, zero], -1), np.stack([rho * s2, s2 * np.sqrt(1.0 - rho * rho)], -1)], -2
    )


def sample_moments(mu, sigma, rho, rng: np.random.Generator | None = None, z=None) -> np.ndarray:
    """``mu + L z`` with ``z ~ N(0, I)``; pass ``z`` to reuse a draw."""
    mu = np.asarray(mu, dtype=np.float64)
    if z is None:
        z = rng.standard_normal(mu.shape)
    L = cholesky_factor(np.asarray(sigma, dtype=np.float64), np.asarray(rho, dtype=np.float64))
    return mu + np.einsum("...ij,...j->...i", L, z)


def sample(g: Gauss2D, rng: np.random.Generator | None = None, z=None) -> np.ndarray:
    return sample_moments(g.mu, g.sigma, g.rho, rng, z)


# ---------------------------------------------------------------- fusion


def fuse(means, variances) -> FusedGaussian:
    """Combine N stochastic passes into one predictive Gaussian per dimension.

    ``means`` and ``variances`` have shape ``(N, ..., d)``. The result's
    variance is the spread of the means plus the average aleatoric variance.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if means.ndim == 0 or means.shape[0] == 0:
        raise ContractError("fuse needs at least one sample")
    if means.shape != variances.shape:
        raise ContractError(f"fuse: shape mismatch {means.shape} vs {variances.shape}")
    n = means.shape[0]
    mu = means.sum(axis=0) / n
    epistemic = (means * means).sum(axis=0) / n - mu * mu
    if n == 1:
        epistemic = np.zeros_like(mu)
    # identical samples can leave a rounding residue of either sign
    epistemic = np.where(np.all(means == means[:1], axis=0), 0.0, np.maximum(epistemic, 0.0))
    aleatoric = variances.sum(axis=0) / n
    return FusedGaussian(mu, epistemic + aleatoric, epistemic, aleatoric)
