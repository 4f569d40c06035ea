"""Experiment targets: log-posteriors, gradients, data generation, sharding.

Every subposterior raises the prior to the power 1/S, so the product of the
S subposterior densities recovers the full posterior exactly.

Model kinds:

* ``logreg``: Bayesian logistic regression with intercept, N(0, 5) priors
  (variance convention).
* ``mog``: 1-d location mixture of three equal-weight Gaussians with known
  component variance; standard-Normal priors; label-permutation symmetry.
* ``robust_reg``: linear regression with t_5 errors; N(0, 10^2) coefficient
  priors; scaled chi-squared prior on the noise scale, sampled on log sigma.
* ``highdim_logreg``: the same logistic model on a 99-dimensional covariate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .samplers import TargetDensity

MODEL_KINDS = ("logreg", "mog", "robust_reg", "highdim_logreg")


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    response: np.ndarray
    feature_names: Optional[list[str]] = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        r = np.asarray(self.response, dtype=float)
        if f.shape[0] != r.shape[0]:
            raise ValueError("feature/response row counts differ")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(r))):
            raise DataError("non-finite entries in dataset")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "response", r)

    @property
    def n(self) -> int:
        return self.response.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ShardedDataset:
    shards: list[Dataset]
    assignment: np.ndarray
    n_shards: int


def _sigmoid(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _design(features):
    return np.column_stack([np.ones(features.shape[0]), features])


def _logreg_target(shard: Dataset, S: int, prior_variance: float) -> TargetDensity:
    X = _design(shard.features)
    y = shard.response

    def log_density(theta):
        eta = X @ theta
        loglik = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
        return loglik - theta @ theta / (2.0 * prior_variance * S)

    def grad_log_density(theta):
        eta = X @ theta
        return X.T @ (y - _sigmoid(eta)) - theta / (prior_variance * S)

    return TargetDensity(log_density, grad_log_density)


def _mog_target(shard: Dataset, S: int, component_variance: float,
                prior_variance: float) -> TargetDensity:
    x = shard.response
    v = component_variance
    k = 3

    def _weights(theta):
        # responsibilities: softmax over components of the log kernels
        logk = -((x[:, None] - theta[None, :]) ** 2) / (2.0 * v)
        mx = logk.max(axis=1, keepdims=True)
        w = np.exp(logk - mx)
        return logk, mx, w

    def log_density(theta):
        logk, mx, w = _weights(theta)
        loglik = float(np.sum(mx[:, 0] + np.log(w.sum(axis=1)))) \
            - x.size * (np.log(k) + 0.5 * np.log(2.0 * np.pi * v))
        return loglik - theta @ theta / (2.0 * prior_variance * S)

    def grad_log_density(theta):
        _, _, w = _weights(theta)
        w = w / w.sum(axis=1, keepdims=True)
        grad = (w * (x[:, None] - theta[None, :])).sum(axis=0) / v
        return grad - theta / (prior_variance * S)

    def symmetry_move(theta, grad, rng):
        perm = rng.permutation(k)
        return theta[perm], grad[perm]

    return TargetDensity(log_density, grad_log_density, symmetry_move)


def _robust_reg_target(shard: Dataset, S: int, coef_variance: float,
                       sigma_scale: float, df: float) -> TargetDensity:
    X = _design(shard.features)
    y = shard.response
    nu = df

    def _split(theta):
        return theta[:-1], theta[-1]

    def log_density(theta):
        beta, log_sigma = _split(theta)
        sigma = np.exp(log_sigma)
        z = (y - X @ beta) / sigma
        loglik = float(-0.5 * (nu + 1.0) * np.sum(np.log1p(z**2 / nu))) \
            - y.size * log_sigma
        # sigma = scale * chi2(1): density ~ (sigma/scale)^{-1/2} exp(-sigma/(2 scale)),
        # plus the log-sigma Jacobian
        log_prior = (-beta @ beta / (2.0 * coef_variance)
                     + 0.5 * log_sigma - sigma / (2.0 * sigma_scale))
        return loglik + log_prior / S

    def grad_log_density(theta):
        beta, log_sigma = _split(theta)
        sigma = np.exp(log_sigma)
        z = (y - X @ beta) / sigma
        u = (nu + 1.0) * z / (nu + z**2)
        g_beta = X.T @ u / sigma
        g_log_sigma = float(np.sum(u * z) - y.size)
        gp_beta = -beta / coef_variance
        gp_log_sigma = 0.5 - sigma / (2.0 * sigma_scale)
        grad = np.empty_like(theta)
        grad[:-1] = g_beta + gp_beta / S
        grad[-1] = g_log_sigma + gp_log_sigma / S
        return grad

    return TargetDensity(log_density, grad_log_density)


def subposterior_target(model_kind: str, shard: Dataset, S: int,
                        prior_params: Optional[dict] = None) -> TargetDensity:
    """Log-density (1/S) log prior + shard log-likelihood, with exact gradient."""
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    p = dict(prior_params or {})
    if model_kind in ("logreg", "highdim_logreg"):
        return _logreg_target(shard, S, p.get("prior_variance", 5.0))
    if model_kind == "mog":
        spread = p.get("component_spread", 0.2)
        if not p.get("spread_is_variance", True):
            spread = spread**2
        return _mog_target(shard, S, spread, p.get("prior_variance", 1.0))
    if model_kind == "robust_reg":
        return _robust_reg_target(shard, S, p.get("coef_variance", 100.0),
                                  p.get("sigma_scale", 10.0), p.get("df", 5.0))
    raise ValueError(f"unknown model kind {model_kind!r}")


def param_dim(model_kind: str, data: Dataset) -> int:
    if model_kind in ("logreg", "highdim_logreg"):
        return data.n_features + 1
    if model_kind == "mog":
        return 3
    if model_kind == "robust_reg":
        return data.n_features + 2
    raise ValueError(f"unknown model kind {model_kind!r}")


def generate_toy(model_kind: str, params: Optional[dict], n: int,
                 seed: int) -> Dataset:
    """Reproducible synthetic datasets for the toy experiments."""
    if n < 1:
        raise ValueError("n must be positive")
    p = dict(params or {})
    rng = np.random.default_rng(seed)
    if model_kind == "logreg":
        theta = np.asarray(p.get("theta", (-3.0, -3.0)), dtype=float)
        x = rng.normal(0.5, 1.0, size=n)
        y = (rng.uniform(size=n) < _sigmoid(theta[0] + theta[1] * x)).astype(float)
        return Dataset(x[:, None], y, ["x"])
    if model_kind == "mog":
        theta = np.asarray(p.get("theta", (0.4, 0.0, -0.4)), dtype=float)
        spread = p.get("component_spread", 0.2)
        sd = np.sqrt(spread) if p.get("spread_is_variance", True) else spread
        comp = rng.integers(0, theta.size, size=n)
        x = theta[comp] + sd * rng.standard_normal(n)
        return Dataset(np.empty((n, 0)), x)
    if model_kind == "highdim_logreg":
        d_cov = int(p.get("n_covariates", 99))
        intercept = float(p.get("intercept", -5.0))
        beta = rng.standard_normal(d_cov)
        X = rng.standard_normal((n, d_cov))
        y = (rng.uniform(size=n) < _sigmoid(intercept + X @ beta)).astype(float)
        return Dataset(X, y)
    raise ValueError(f"no generator for model kind {model_kind!r}")


def shard_split(data: Dataset, S: int, seed: int) -> ShardedDataset:
    """Uniform random partition into S near-equal shards."""
    if S > data.n:
        raise ValueError(f"cannot split {data.n} rows into {S} shards")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    assignment = np.empty(data.n, dtype=int)
    shards = []
    for k, idx in enumerate(np.array_split(perm, S)):
        assignment[idx] = k
        shards.append(Dataset(data.features[idx], data.response[idx],
                              data.feature_names))
    return ShardedDataset(shards, assignment, S)


def load_csv(path, schema: Optional[dict] = None) -> Dataset:
    """Numeric CSV with a header row; the response column is named or indexed
    by schema["response"] (default: last column)."""
    schema = dict(schema or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} "
                                f"columns, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                bad = next(i for i, c in enumerate(row)
                           if not _is_float(c))
                raise DataError(f"{path}:{lineno}: non-numeric value "
                                f"{row[bad]!r} in column {header[bad]!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    mat = np.asarray(rows, dtype=float)
    resp = schema.get("response", header[-1])
    if isinstance(resp, str):
        if resp not in header:
            raise DataError(f"{path}: response column {resp!r} not in header")
        resp = header.index(resp)
    cols = [i for i in range(len(header)) if i != resp]
    features = mat[:, cols]
    if schema.get("standardize", False) and features.shape[1]:
        sd = features.std(axis=0, ddof=1)
        sd[sd == 0.0] = 1.0
        features = (features - features.mean(axis=0)) / sd
    names = [header[i] for i in cols]
    return Dataset(features, mat[:, resp], names)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def map_estimate(target: TargetDensity, init, n_steps: int = 200,
                 step_size: float = 1e-2) -> np.ndarray:
    """Adam warm start towards the posterior mode for chain initialisation."""
    theta = np.asarray(init, dtype=float).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for i in range(1, n_steps + 1):
        g = -target.grad_log_density(theta)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1.0 - 0.9**i)
        vh = v / (1.0 - 0.999**i)
        theta -= step_size * mh / (np.sqrt(vh) + 1e-8)
    return theta
