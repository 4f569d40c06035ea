"""Sample moments, symmetric matrix square roots and Gaussian product algebra.

Each shard's draws are standardised by the affine map
x -> A^{-1}(theta - mu) where mu is the sample mean and A is the symmetric
positive-definite square root of the sample covariance.  Scores transform the
opposite way, grad -> A grad.  The per-shard Gaussians N(mu_s, A_s A_s^T)
multiply into the parametric-Gaussian merge, which also serves as the noise
prior of the merged diffusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EIG_FLOOR_REL = 1e-10


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def sym_sqrt(mat: np.ndarray, floor_rel: float = EIG_FLOOR_REL):
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below floor_rel * max(eigenvalue) are floored to keep thinned
    chains on near-degenerate posteriors from crashing the pipeline.  Returns
    (sqrt, inv_sqrt, log_det_sqrt).
    """
    mat = np.asarray(mat, dtype=float)
    evals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    top = evals[-1]
    if not np.isfinite(top) or top <= 0.0:
        raise SingularMatrixError(
            f"covariance has no positive eigenvalues (largest is {top})"
        )
    floor = floor_rel * top
    evals = np.maximum(evals, floor)
    root = np.sqrt(evals)
    sqrt = (vecs * root) @ vecs.T
    inv_sqrt = (vecs / root) @ vecs.T
    log_det = 0.5 * np.sum(np.log(evals))
    return sqrt, inv_sqrt, log_det


@dataclass(frozen=True)
class AffineMap:
    """Per-shard standardising transform: z = inv_sqrt_cov @ (theta - mu)."""

    mu: np.ndarray
    sqrt_cov: np.ndarray
    inv_sqrt_cov: np.ndarray
    log_det_sqrt_cov: float

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def identity(cls, d: int) -> "AffineMap":
        return cls(np.zeros(d), np.eye(d), np.eye(d), 0.0)

    def covariance(self) -> np.ndarray:
        return self.sqrt_cov @ self.sqrt_cov

    def to_gaussian(self) -> "GaussianApprox":
        return GaussianApprox.from_moments(self.mu, self.covariance())


def fit_affine(samples: np.ndarray) -> AffineMap:
    """Fit mean and symmetric covariance root to a sample matrix (n x d)."""
    samples = np.asarray(samples, dtype=float)
    n, d = samples.shape
    if n < d + 1:
        raise ValueError(f"need at least d+1={d + 1} samples, got {n}")
    mu = samples.mean(axis=0)
    cov = np.cov(samples, rowvar=False, ddof=1).reshape(d, d)
    sqrt, inv_sqrt, log_det = sym_sqrt(cov)
    return AffineMap(mu, sqrt, inv_sqrt, log_det)


def standardize(amap: AffineMap, samples: np.ndarray, scores: np.ndarray):
    """Map draws to z = A^{-1}(theta - mu) and scores to A grad, row-wise."""
    samples = np.asarray(samples, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if samples.shape != scores.shape:
        raise ValueError(f"shape mismatch: {samples.shape} vs {scores.shape}")
    z = (samples - amap.mu) @ amap.inv_sqrt_cov
    g = scores @ amap.sqrt_cov
    return z, g


@dataclass(frozen=True)
class GaussianApprox:
    mean: np.ndarray
    cov: np.ndarray
    precision: np.ndarray

    @classmethod
    def from_moments(cls, mean, cov) -> "GaussianApprox":
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        precision = np.linalg.inv(cov)
        return cls(mean, cov, 0.5 * (precision + precision.T))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def log_density(self, theta) -> np.ndarray:
        """Log density up to the normalising constant; theta (d,) or (n, d)."""
        diff = np.atleast_2d(theta) - self.mean
        quad = np.einsum("ni,ij,nj->n", diff, self.precision, diff)
        out = -0.5 * quad
        return out[0] if np.ndim(theta) == 1 else out

    def grad_log_density(self, theta) -> np.ndarray:
        diff = np.atleast_2d(theta) - self.mean
        out = -diff @ self.precision
        return out[0] if np.ndim(theta) == 1 else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.dim)) @ chol.T


def gaussian_product(components: list[GaussianApprox]) -> GaussianApprox:
    """Product of Gaussian densities: precisions add, means precision-average."""
    if not components:
        raise ValueError("need at least one component")
    d = components[0].dim
    for c in components:
        if c.dim != d:
            raise ValueError(f"dimension mismatch: {c.dim} != {d}")
    precision = sum(c.precision for c in components)
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ sum(c.precision @ c.mean for c in components)
    return GaussianApprox(mean, cov, precision)


def score_sum_mismatch(components: list[GaussianApprox], sched, t):
    """Analytic product-vs-noise mismatch for Gaussian targets.

    Returns (tilde, correct): ``tilde`` is the Gaussian whose score equals the
    sum of the noised component scores at time t; ``correct`` is the noised
    product of the components.  They coincide only at t=0, which makes the
    pair a closed-form oracle for why naive score summation fails.
    """
    m = float(sched.mean_scale(t))
    s2 = float(sched.noise_scale(t)) ** 2
    d = components[0].dim
    eye = np.eye(d)

    noised = [
        GaussianApprox.from_moments(m * c.mean, m**2 * c.cov + s2 * eye)
        for c in components
    ]
    tilde = gaussian_product(noised)

    prod = gaussian_product(components)
    correct = GaussianApprox.from_moments(m * prod.mean, m**2 * prod.cov + s2 * eye)
    return tilde, correct
