"""Hamiltonian Monte Carlo with score recording, and annealed sampling.

``hmc_sample`` runs a single chain with a fixed number of leapfrog steps and
optional dual-averaging step-size adaptation during burn-in.  The gradient of
the log-density at the current state is already available from the leapfrog
path, so subposterior score evaluations are recorded for free.

``annealed_sample`` transports a population of particles from the Gaussian
noise prior at t=1 down an evenly spaced time grid to t=0, applying a fixed
number of Metropolis-adjusted HMC updates to each intermediate density.  All
particles are updated in one vectorised sweep per step.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .training import ShardDraws


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TargetDensity:
    """Unnormalised log-density with exact gradient.

    ``symmetry_move``, when present, maps (theta, grad, rng) to an equivalent
    (theta, grad) under a density-preserving coordinate permutation; it is
    applied before each HMC step to encourage mixing across symmetric modes.
    """

    log_density: Callable[[np.ndarray], float]
    grad_log_density: Callable[[np.ndarray], np.ndarray]
    symmetry_move: Optional[Callable] = None


@dataclass(frozen=True)
class HmcConfig:
    n_samples: int = 10_000
    burn_in: int = 100
    leapfrog_steps: int = 10
    step_size: float | str = "adapt"
    target_accept: float = 0.8
    mass_matrix: Optional[np.ndarray] = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.leapfrog_steps < 1 or not (0.0 < self.target_accept < 1.0):
            raise ValueError(f"invalid HMC config: {self}")


@dataclass(frozen=True)
class AnnealConfig:
    n_particles: int = 1000
    n_outer: int = 300
    n_inner: int = 1
    leapfrog_steps: int = 3
    step_size: Optional[float] = None  # None: pre-tune at t=1
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_outer < 1 or self.n_inner < 0 or self.n_particles < 1:
            raise ValueError(f"invalid anneal config: {self}")


def leapfrog(grad_fn, theta, p, step, n_steps, inv_mass=None, grad0=None):
    """Standard leapfrog integrator; returns (theta, p, grad at endpoint).

    ``inv_mass`` multiplies the momentum in the position update.  Passing the
    cached gradient at the start point avoids one gradient evaluation.
    """
    theta = np.array(theta, dtype=float)
    p = np.array(p, dtype=float)
    grad = grad_fn(theta) if grad0 is None else grad0
    p = p + 0.5 * step * grad
    for i in range(n_steps):
        if inv_mass is None:
            theta = theta + step * p
        else:
            theta = theta + step * (p @ inv_mass)
        grad = grad_fn(theta)
        p = p + (step if i < n_steps - 1 else 0.5 * step) * grad
    return theta, p, grad


def _kinetic(p, inv_mass):
    if inv_mass is None:
        return 0.5 * float(p @ p)
    return 0.5 * float(p @ inv_mass @ p)


def _find_reasonable_step(logp_fn, grad_fn, theta, rng, inv_mass, chol_mass, d):
    """Double/halve the step until a single leapfrog step's joint-density
    ratio crosses 1/2 (standard HMC initialisation heuristic)."""
    step = 0.1 / d**0.25
    p0 = _draw_momentum(rng, d, chol_mass)
    logp0 = logp_fn(theta) - _kinetic(p0, inv_mass)
    theta1, p1, _ = leapfrog(grad_fn, theta, p0, step, 1, inv_mass)
    logp1 = logp_fn(theta1) - _kinetic(p1, inv_mass)
    if not np.isfinite(logp1):
        logp1 = -np.inf
    direction = 1.0 if logp1 - logp0 > np.log(0.5) else -1.0
    for _ in range(50):
        step *= 2.0**direction
        theta1, p1, _ = leapfrog(grad_fn, theta, p0, step, 1, inv_mass)
        logp1 = logp_fn(theta1) - _kinetic(p1, inv_mass)
        if not np.isfinite(logp1):
            logp1 = -np.inf
        if direction * (logp1 - logp0) <= direction * np.log(0.5):
            break
    return step


def _draw_momentum(rng, d, chol_mass):
    z = rng.standard_normal(d)
    return z if chol_mass is None else chol_mass @ z


def hmc_sample(target: TargetDensity, config: HmcConfig, init) -> ShardDraws:
    """HMC chain with gradient recording at every retained draw."""
    theta = np.asarray(init, dtype=float).copy()
    d = theta.shape[0]
    rng = np.random.default_rng(config.rng_seed)

    inv_mass = chol_mass = None
    if config.mass_matrix is not None:
        mass = np.asarray(config.mass_matrix, dtype=float)
        inv_mass = np.linalg.inv(mass)
        chol_mass = np.linalg.cholesky(mass)

    logp = target.log_density(theta)
    if not np.isfinite(logp):
        raise ValueError(f"initial point has non-finite log-density: {logp}")
    grad = target.grad_log_density(theta)

    adapt = config.step_size == "adapt"
    if adapt:
        step = _find_reasonable_step(target.log_density, target.grad_log_density,
                                     theta, rng, inv_mass, chol_mass, d)
        mu = np.log(10.0 * step)
        log_step_bar, h_bar = 0.0, 0.0
        gamma, t0, kappa_da = 0.05, 10.0, 0.75
    else:
        step = float(config.step_size)

    samples = np.empty((config.n_samples, d))
    scores = np.empty((config.n_samples, d))
    divergences = 0
    accepted = 0
    total = config.burn_in + config.n_samples

    for it in range(total):
        if target.symmetry_move is not None:
            theta, grad = target.symmetry_move(theta, grad, rng)
        p0 = _draw_momentum(rng, d, chol_mass)
        h0 = logp - _kinetic(p0, inv_mass)
        theta1, p1, grad1 = leapfrog(target.grad_log_density, theta, p0, step,
                                     config.leapfrog_steps, inv_mass, grad0=grad)
        logp1 = target.log_density(theta1)
        h1 = logp1 - _kinetic(p1, inv_mass)
        log_ratio = h1 - h0
        if not np.isfinite(log_ratio):
            log_ratio = -np.inf
            divergences += 1
        accept_prob = min(1.0, np.exp(min(log_ratio, 0.0)))
        if np.log(rng.uniform()) < log_ratio:
            theta, logp, grad = theta1, logp1, grad1
            accepted += 1

        if adapt and it < config.burn_in:
            frac = 1.0 / (it + 1 + t0)
            h_bar = (1.0 - frac) * h_bar + frac * (config.target_accept - accept_prob)
            log_step = mu - np.sqrt(it + 1) / gamma * h_bar
            eta = (it + 1) ** (-kappa_da)
            log_step_bar = eta * log_step + (1.0 - eta) * log_step_bar
            step = np.exp(log_step)
            if it == config.burn_in - 1:
                step = np.exp(log_step_bar)

        if it >= config.burn_in:
            samples[it - config.burn_in] = theta
            scores[it - config.burn_in] = grad

    if divergences:
        print(f"hmc: {divergences} divergent trajectories out of {total}",
              file=sys.stderr)
    return ShardDraws(samples, scores)


def _batch_hmc_step(density_seq, t, X, logp, grad, step, n_leapfrog, rng):
    """One Metropolis-adjusted HMC update applied to all particles at once."""
    n = X.shape[0]
    P0 = rng.standard_normal(X.shape)
    P = P0 + 0.5 * step * grad
    Xn = X.copy()
    g = grad
    for i in range(n_leapfrog):
        Xn = Xn + step * P
        g = density_seq.grad_log_density(Xn, t)
        P = P + (step if i < n_leapfrog - 1 else 0.5 * step) * g
    logp_new = density_seq.log_density(Xn, t)
    log_ratio = (logp_new - 0.5 * np.sum(P**2, axis=1)) - \
                (logp - 0.5 * np.sum(P0**2, axis=1))
    log_ratio = np.where(np.isfinite(log_ratio), log_ratio, -np.inf)
    accept = np.log(rng.uniform(size=n)) < log_ratio
    X = np.where(accept[:, None], Xn, X)
    logp = np.where(accept, logp_new, logp)
    grad = np.where(accept[:, None], g, grad)
    return X, logp, grad, float(accept.mean())


def tune_step_size(density_seq, t, X0, rng, n_leapfrog, target=0.8,
                   n_rounds=15, n_probe=128):
    """Multiplicative search for a step size hitting the target acceptance."""
    d = X0.shape[1]
    step = 0.5 / d**0.25
    idx = rng.integers(0, X0.shape[0], size=min(n_probe, X0.shape[0]))
    X = X0[idx].copy()
    logp = density_seq.log_density(X, t)
    grad = density_seq.grad_log_density(X, t)
    for _ in range(n_rounds):
        _, _, _, rate = _batch_hmc_step(density_seq, t, X, logp, grad, step,
                                        n_leapfrog, rng)
        if rate < target - 0.05:
            step *= 0.6
        elif rate > target + 0.05:
            step *= 1.4
        else:
            break
    return step


def annealed_sample(density_seq, config: AnnealConfig) -> np.ndarray:
    """Anneal particles from the t=1 Gaussian prior down to the t=0 target.

    ``density_seq`` must expose vectorised ``log_density(X, t)``,
    ``grad_log_density(X, t)`` and exact prior sampling ``sample_prior(n, rng)``.
    """
    rng = np.random.default_rng(config.rng_seed)
    X = density_seq.sample_prior(config.n_particles, rng)

    step = config.step_size
    if step is None:
        step = tune_step_size(density_seq, 1.0, X, rng, config.leapfrog_steps)

    t = 1.0
    logp = density_seq.log_density(X, t)
    grad = density_seq.grad_log_density(X, t)
    for i in range(1, config.n_outer + 1):
        t = max(1.0 - i / config.n_outer, 0.0)
        logp = density_seq.log_density(X, t)
        grad = density_seq.grad_log_density(X, t)
        if not np.all(np.isfinite(logp)):
            bad = int(np.argmin(np.isfinite(logp)))
            raise NumericalError(f"non-finite energy for particle {bad} at t={t}")
        for _ in range(config.n_inner):
            X, logp, grad, _ = _batch_hmc_step(density_seq, t, X, logp, grad,
                                               step, config.leapfrog_steps, rng)
    return X
