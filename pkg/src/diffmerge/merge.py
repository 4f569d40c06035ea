"""Merged-posterior construction and baseline merge methods.

The diffusion merge evaluates, for each shard, the trained energy at the
standardised point A_s^{-1}(theta - mu_s) and sums:

    log p_t(theta) = -sum_s E_s(A_s^{-1}(theta - mu_s), t)   (+ const).

At t=1 every zero-trained energy is the standard Gaussian, so the merged
density reduces to the product of the per-shard Gaussian approximations --
the same Gaussian the parametric baseline returns, used here as the exactly
sampleable prior for annealed sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affine import AffineMap, GaussianApprox, gaussian_product, sym_sqrt
from .energy import EnergyModel


@dataclass(frozen=True)
class MergedDensity:
    """Product of per-shard learned densities plus its Gaussian prior."""

    shards: list[tuple[EnergyModel, AffineMap]]
    prior: GaussianApprox

    @classmethod
    def from_shards(cls, shards) -> "MergedDensity":
        shards = list(shards)
        if not shards:
            raise ValueError("need at least one shard")
        d = shards[0][1].dim
        for model, amap in shards:
            if amap.dim != d or model.config.input_dim != d:
                raise ValueError("shards disagree on dimension")
        prior = gaussian_product([amap.to_gaussian() for _, amap in shards])
        return cls(shards, prior)

    @property
    def dim(self) -> int:
        return self.shards[0][1].dim

    def log_density(self, theta, t) -> np.ndarray:
        """-sum of shard energies, up to an additive constant."""
        single = np.ndim(theta) == 1
        X = np.atleast_2d(np.asarray(theta, dtype=float))
        total = np.zeros(X.shape[0])
        for model, amap in self.shards:
            z = (X - amap.mu) @ amap.inv_sqrt_cov
            total -= np.atleast_1d(model.energy(z, t))
        return float(total[0]) if single else total

    def grad_log_density(self, theta, t) -> np.ndarray:
        """Chain rule through the symmetric standardising maps."""
        single = np.ndim(theta) == 1
        X = np.atleast_2d(np.asarray(theta, dtype=float))
        total = np.zeros_like(X)
        for model, amap in self.shards:
            z = (X - amap.mu) @ amap.inv_sqrt_cov
            total += np.atleast_2d(model.score(z, t)) @ amap.inv_sqrt_cov
        return total[0] if single else total

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.prior.sample(n, rng)

    def at_time(self, t: float) -> "_FixedTimeDensity":
        return _FixedTimeDensity(self, float(t))


class _FixedTimeDensity:
    """Adapter exposing the merged density at fixed t as a TargetDensity-like
    pair of callables for the plain HMC sampler."""

    def __init__(self, md: MergedDensity, t: float):
        self.md = md
        self.t = t

    def log_density(self, theta):
        return self.md.log_density(theta, self.t)

    def grad_log_density(self, theta):
        return self.md.grad_log_density(theta, self.t)


def merged_log_density(md: MergedDensity, theta, t):
    return md.log_density(theta, t)


def consensus_merge(shard_samples: list[np.ndarray], weights: str = "covariance"):
    """Weighted average of index-paired draws across shards.

    Default weights are the inverse shard sample covariances; ``uniform``
    averages plainly (exact only for equal-covariance shards).
    """
    mats = [np.asarray(m, dtype=float) for m in shard_samples]
    n = mats[0].shape[0]
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("consensus merge requires equal sample counts per shard")
    d = mats[0].shape[1]
    if weights == "uniform":
        ws = [np.eye(d) for _ in mats]
    elif weights == "covariance":
        ws = [np.linalg.inv(np.cov(m, rowvar=False, ddof=1).reshape(d, d))
              for m in mats]
    else:
        raise ValueError(f"unknown weighting {weights!r}")
    w_sum = sum(ws)
    try:
        w_sum_inv = np.linalg.inv(w_sum)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"singular consensus weight sum: {exc}") from exc
    out = np.zeros((n, d))
    for w, m in zip(ws, mats):
        out += m @ w.T
    return out @ w_sum_inv.T


def swiss_merge(shard_samples: list[np.ndarray],
                shard_gaussians: list[GaussianApprox]) -> list[np.ndarray]:
    """Affinely map each shard's draws onto the product-Gaussian moments.

    Each shard is transformed by theta -> B_s (theta - mu_s) + mu_prod with
    B_s = V_prod^{1/2} V_s^{-1/2} (symmetric roots).  Returns the transformed
    shards; concatenating them pools the merged sample.
    """
    if len(shard_samples) != len(shard_gaussians):
        raise ValueError("one Gaussian per shard required")
    prod = gaussian_product(shard_gaussians)
    prod_sqrt, _, _ = sym_sqrt(prod.cov)
    out = []
    for samples, g in zip(shard_samples, shard_gaussians):
        _, inv_sqrt_s, _ = sym_sqrt(g.cov)
        b = prod_sqrt @ inv_sqrt_s
        out.append((np.asarray(samples, dtype=float) - g.mean) @ b.T + prod.mean)
    return out


def gaussian_merge(shard_gaussians: list[GaussianApprox]) -> GaussianApprox:
    """Parametric Gaussian merge; identical to the diffusion noise prior."""
    return gaussian_product(shard_gaussians)
