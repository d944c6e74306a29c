"""Gaussian pixel representations, mutual likelihood scoring, and prototype fusion.

A pixel embedding is modelled as a diagonal Gaussian: a mean vector plus a
per-dimension variance, where small variance means high confidence. Class
prototypes are fused from many such embeddings by precision weighting, so
confident observations dominate and the fused variance shrinks as
observations accumulate.

Everything here is a pure function over immutable inputs and is safe to call
from multiple threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Variance bounds enforced on pixel representations. The variance-producing
# network head clamps into this range; this module validates it.
SIGMA2_MIN = 1e-6
SIGMA2_MAX = 1e6

_LOG_2PI = math.log(2.0 * math.pi)


def _as_readonly_vector(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ProbRep:
    """Probabilistic pixel embedding: mean and per-dimension variance."""

    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        mu = _as_readonly_vector(self.mu, "mu")
        sigma2 = _as_readonly_vector(self.sigma2, "sigma2")
        if mu.shape != sigma2.shape:
            raise ValueError(f"mu and sigma2 must have equal length, got {mu.size} and {sigma2.size}")
        if np.any(sigma2 < SIGMA2_MIN) or np.any(sigma2 > SIGMA2_MAX):
            raise ValueError(f"sigma2 components must lie in [{SIGMA2_MIN:g}, {SIGMA2_MAX:g}]")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass(frozen=True, eq=False)
class DistPrototype:
    """Class prototype as a Gaussian fused from observed embeddings.

    Per dimension the fused precision 1/sigma2_hat is the sum of observation
    precisions, hence sigma2_hat never exceeds the smallest observed variance
    and keeps shrinking as observations accumulate. Unlike ProbRep, the fused
    variance may drop below SIGMA2_MIN.
    """

    mu_hat: np.ndarray
    sigma2_hat: np.ndarray
    n_obs: int
    class_id: int

    def __post_init__(self):
        mu_hat = _as_readonly_vector(self.mu_hat, "mu_hat")
        sigma2_hat = _as_readonly_vector(self.sigma2_hat, "sigma2_hat")
        if mu_hat.shape != sigma2_hat.shape:
            raise ValueError("mu_hat and sigma2_hat must have equal length")
        if np.any(sigma2_hat <= 0.0):
            raise ValueError("sigma2_hat components must be strictly positive")
        if int(self.n_obs) < 0:
            raise ValueError("n_obs must be nonnegative")
        object.__setattr__(self, "mu_hat", mu_hat)
        object.__setattr__(self, "sigma2_hat", sigma2_hat)
        object.__setattr__(self, "n_obs", int(self.n_obs))

    # Aliases so a prototype can stand in wherever a ProbRep is scored.
    @property
    def mu(self) -> np.ndarray:
        return self.mu_hat

    @property
    def sigma2(self) -> np.ndarray:
        return self.sigma2_hat

    @property
    def dim(self) -> int:
        return self.mu_hat.size


@dataclass(frozen=True, eq=False)
class PointPrototype:
    """Deterministic class prototype: the arithmetic mean of member vectors."""

    mu: np.ndarray
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_readonly_vector(self.mu, "mu"))

    @property
    def dim(self) -> int:
        return self.mu.size


def _gaussian_params(x) -> tuple[np.ndarray, np.ndarray]:
    try:
        return x.mu, x.sigma2
    except AttributeError:
        raise TypeError(f"expected a ProbRep or DistPrototype, got {type(x).__name__}") from None


def mls(a, b) -> float:
    """Mutual likelihood score between two diagonal-Gaussian embeddings.

    The log-likelihood that both embeddings emit the same latent value: a
    variance-weighted squared distance plus a log-variance penalty, summed per
    dimension. Symmetric in its arguments; accepts ProbRep or DistPrototype in
    either slot.
    """
    mu_a, s2_a = _gaussian_params(a)
    mu_b, s2_b = _gaussian_params(b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"dimension mismatch: {mu_a.size} vs {mu_b.size}")
    s = s2_a + s2_b
    if np.any(s <= 0.0):
        raise ValueError("variances must be strictly positive")
    d = mu_a - mu_b
    return float(-0.5 * np.sum(d * d / s + np.log(s)) - 0.5 * mu_a.size * _LOG_2PI)


def mls_batch(mu: np.ndarray, sigma2: np.ndarray, other) -> np.ndarray:
    """Vectorized mls of n embeddings, given as (n, D) arrays, against one target."""
    mu_o, s2_o = _gaussian_params(other)
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if mu.ndim != 2 or mu.shape[1] != mu_o.size:
        raise ValueError(f"expected (n, {mu_o.size}) mean array, got shape {mu.shape}")
    s = sigma2 + s2_o[None, :]
    d = mu - mu_o[None, :]
    return -0.5 * np.sum(d * d / s + np.log(s), axis=1) - 0.5 * mu_o.size * _LOG_2PI


def mls_grad(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives of mls(a, b) with respect to both means and variances.

    Returns (d_mu_a, d_sigma2_a, d_mu_b, d_sigma2_b). The variance derivative
    is shared between the two slots; its sign tracks whether the squared mean
    gap exceeds the summed variance.
    """
    mu_a, s2_a = _gaussian_params(a)
    mu_b, s2_b = _gaussian_params(b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"dimension mismatch: {mu_a.size} vs {mu_b.size}")
    s = s2_a + s2_b
    if np.any(s <= 0.0):
        raise ValueError("variances must be strictly positive")
    d = mu_a - mu_b
    d_mu_a = -d / s
    d_sigma2 = (d * d - s) / (2.0 * s * s)
    return d_mu_a, d_sigma2, -d_mu_a, d_sigma2.copy()


def fuse_gaussians(mu: np.ndarray, sigma2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Precision-weighted fusion of n diagonal Gaussians given as (n, D) arrays."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if mu.ndim != 2 or mu.shape != sigma2.shape or mu.shape[0] == 0:
        raise ValueError(f"expected matching non-empty (n, D) arrays, got {mu.shape} and {sigma2.shape}")
    precision = 1.0 / sigma2
    sigma2_hat = 1.0 / precision.sum(axis=0)
    mu_hat = sigma2_hat * (mu * precision).sum(axis=0)
    return mu_hat, sigma2_hat


def fuse_prototype(obs: Sequence[ProbRep], class_id: int) -> DistPrototype:
    """Fuse observed embeddings of one class into a distribution prototype.

    Per dimension the fused precision is the sum of observation precisions and
    the fused mean weights each observation by its share of that precision.
    """
    if len(obs) == 0:
        raise ValueError("cannot fuse an empty observation list")
    dim = obs[0].dim
    for z in obs:
        if z.dim != dim:
            raise ValueError("observations must share one dimension")
    mu_hat, sigma2_hat = fuse_gaussians(
        np.stack([z.mu for z in obs]), np.stack([z.sigma2 for z in obs])
    )
    return DistPrototype(mu_hat, sigma2_hat, n_obs=len(obs), class_id=class_id)


def update_prototype(proto: DistPrototype, z: ProbRep) -> DistPrototype:
    """Fold one more observation into a prototype (conjugate recursive update).

    Equivalent to refusing the full observation set with z appended.
    """
    if proto.dim != z.dim:
        raise ValueError(f"dimension mismatch: {proto.dim} vs {z.dim}")
    prec = 1.0 / proto.sigma2_hat + 1.0 / z.sigma2
    sigma2_hat = 1.0 / prec
    mu_hat = sigma2_hat * (proto.mu_hat / proto.sigma2_hat + z.mu / z.sigma2)
    return DistPrototype(mu_hat, sigma2_hat, n_obs=proto.n_obs + 1, class_id=proto.class_id)


def point_prototype(mus: Sequence[np.ndarray], class_id: int) -> PointPrototype:
    """Arithmetic-mean prototype over deterministic representation vectors."""
    if len(mus) == 0:
        raise ValueError("cannot average an empty vector list")
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in mus])
    if stacked.ndim != 2:
        raise ValueError("expected 1-D vectors of equal length")
    return PointPrototype(stacked.mean(axis=0), class_id=class_id)
