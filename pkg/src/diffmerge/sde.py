"""Variance-preserving noise schedule.

The forward noising process is an inhomogeneous Ornstein-Uhlenbeck SDE

    dX_t = -0.5 beta(t) X_t dt + sqrt(beta(t)) dW_t

with a linearly increasing rate beta(t) = beta_min + t (beta_max - beta_min).
Its transition kernel is Gaussian,

    X_t | X_0 = x0  ~  N(m(t) x0, s(t)^2 I),

with m(t) = exp(-0.5 * int_0^t beta(u) du) and s(t)^2 = 1 - m(t)^2, so the
process preserves unit variance: m(t)^2 + s(t)^2 = 1 for all t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VpSchedule:
    """Immutable variance-preserving schedule with linear beta(t)."""

    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if not (0.0 < self.beta_min < self.beta_max):
            raise ValueError(
                f"need 0 < beta_min < beta_max, got ({self.beta_min}, {self.beta_max})"
            )

    def _check_t(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError(f"t must lie in [0, 1], got {t}")
        return t

    def beta(self, t):
        t = self._check_t(t)
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def beta_integral(self, t):
        """int_0^t beta(u) du, in closed form for the linear schedule."""
        t = self._check_t(t)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2

    def mean_scale(self, t):
        """Transition-kernel mean coefficient m(t)."""
        return np.exp(-0.5 * self.beta_integral(t))

    def noise_scale(self, t):
        """Transition-kernel standard deviation s(t) = sqrt(1 - m(t)^2)."""
        m = self.mean_scale(t)
        return np.sqrt(np.maximum(1.0 - m**2, 0.0))

    def kappa(self, t, sigma_data: float = 1.0):
        """Denoising/target score-matching mixing weight in [0, 1].

        kappa_t = s(t)^2 / (s(t)^2 + m(t)^2 sigma_data^2); for unit-variance
        (standardised) data this reduces to s(t)^2.
        """
        if sigma_data <= 0.0:
            raise ValueError(f"sigma_data must be positive, got {sigma_data}")
        m2 = self.mean_scale(t) ** 2
        s2 = 1.0 - m2
        return s2 / (s2 + m2 * sigma_data**2)

    def sample_transition(self, x0, t, rng: np.random.Generator):
        """Draw x_t ~ N(m(t) x0, s(t)^2 I); returns (x_t, eps).

        The standard-normal draw eps is returned so the caller can form the
        transition-kernel score -eps / s(t) without recomputation.  t may be
        a scalar or a per-row vector when x0 is a matrix.
        """
        x0 = np.asarray(x0, dtype=float)
        t = self._check_t(t)
        if np.any(t <= 0.0):
            raise ValueError("sample_transition requires t > 0 (kernel degenerate at t=0)")
        m = self.mean_scale(t)
        s = self.noise_scale(t)
        if x0.ndim == 2 and np.ndim(m) == 1:
            m = m[:, None]
            s = s[:, None]
        eps = rng.standard_normal(x0.shape)
        return m * x0 + s * eps, eps
