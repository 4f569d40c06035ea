"""Per-shard score-model training.

The loss regresses the modelled score at a noised point x_t onto a convex
combination of the two available targets:

    kappa_t * (-eps / s(t))                 (denoising target)
    (1 - kappa_t) * m(t)^{-1} * A grad      (rescaled data score)

with kappa_t = s(t)^2 for standardised data.  Near t=0 the data-score term
dominates (the denoising target's variance explodes there); near t=1 the
denoising term dominates (the rescaled data score blows up as m -> 0).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

from .affine import AffineMap, fit_affine, standardize
from .energy import EnergyModel, NetConfig
from .sde import VpSchedule


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShardDraws:
    """Subposterior draws and the matching log-density gradients."""

    samples: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        g = np.asarray(self.scores, dtype=float)
        if s.shape != g.shape:
            raise ValueError(f"samples {s.shape} and scores {g.shape} differ in shape")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(g))):
            raise ValueError("non-finite entries in shard draws")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "scores", g)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    rng_seed: int = 0
    t_floor: float = 1e-5
    hidden_dim: int = 32
    n_residual_blocks: int = 1
    log_every: int = 0  # epochs between progress lines; 0 disables

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.step_size <= 0:
            raise ValueError(f"invalid training config: {self}")


class Adam:
    def __init__(self, params, step_size=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def update(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.step_size * (m / c1) / (np.sqrt(v / c2) + self.eps)


def regression_target(sched: VpSchedule, x0, xt, eps, t, raw_score_transformed):
    """Convex combination of the denoising and data-score targets.

    ``raw_score_transformed`` must already be the standardised score A grad.
    Accepts batched rows with per-row t.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0):
        raise ValueError("regression target undefined at t=0")
    m = sched.mean_scale(t)
    s = sched.noise_scale(t)
    kap = sched.kappa(t, sigma_data=1.0)
    eps = np.asarray(eps, dtype=float)
    g = np.asarray(raw_score_transformed, dtype=float)
    if eps.ndim == 2 and np.ndim(m) == 1:
        m = m[:, None]
        s = s[:, None]
        kap = kap[:, None]
    return kap * (-eps / s) + (1.0 - kap) * (g / m)


def batch_loss(model: EnergyModel, x0_batch, score_batch, sched: VpSchedule,
               rng: np.random.Generator, t_floor: float = 1e-5):
    """Monte Carlo loss and exact parameter gradients for one batch.

    Draws fresh (t, eps) per row, noises x0, and regresses the model score at
    x_t onto the combined target.  Loss is the mean over rows of the squared
    error summed over dimensions.
    """
    X0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    G = np.atleast_2d(np.asarray(score_batch, dtype=float))
    if X0.size == 0:
        raise ValueError("empty batch")
    B = X0.shape[0]
    t = rng.uniform(t_floor, 1.0, size=B)
    Xt, eps = sched.sample_transition(X0, t, rng)
    target = regression_target(sched, X0, Xt, eps, t, G)

    s = sched.noise_scale(t)
    c = sched.mean_scale(t) ** 2 + s**2
    holder = {}

    def cotangent(score):
        holder["score"] = score
        return 2.0 * (score - target) / B

    score, grads = model.score_and_grad_params(cotangent, Xt, s, c)
    loss = float(np.sum((score - target) ** 2) / B)
    if not np.isfinite(loss):
        raise TrainingError("non-finite training loss")
    return loss, grads


def train_shard(draws: ShardDraws, config: TrainConfig, sched: VpSchedule,
                label: str = "shard"):
    """Algorithm: fit the standardising map, then minimise the combined loss.

    Each epoch performs ceil(n / batch_size) Adam updates on batches drawn by
    uniform categorical resampling of the shard draws.  Deterministic given
    config.rng_seed.  Returns (EnergyModel, AffineMap).
    """
    n, d = draws.n, draws.dim
    if n < d + 1:
        raise ValueError(f"need at least d+1={d + 1} draws, got {n}")
    amap = fit_affine(draws.samples)
    Z, G = standardize(amap, draws.samples, draws.scores)

    rng = np.random.default_rng(config.rng_seed)
    net = NetConfig(input_dim=d, hidden_dim=config.hidden_dim,
                    n_residual_blocks=config.n_residual_blocks)
    model = EnergyModel(net, sched, rng=rng)
    opt = Adam(model.params, config.step_size, config.beta1, config.beta2,
               config.eps_adam)

    updates_per_epoch = -(-n // config.batch_size)
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        for _ in range(updates_per_epoch):
            idx = rng.integers(0, n, size=config.batch_size)
            try:
                loss, grads = batch_loss(model, Z[idx], G[idx], sched, rng,
                                         config.t_floor)
            except TrainingError as exc:
                raise TrainingError(f"{label} epoch {epoch}: {exc}") from exc
            opt.update(model.params, grads)
            epoch_loss += loss
        if config.log_every and (epoch + 1) % config.log_every == 0:
            print(f"[{label}] epoch {epoch + 1}/{config.epochs} "
                  f"loss {epoch_loss / updates_per_epoch:.4f}", file=sys.stderr)
    return model, amap
