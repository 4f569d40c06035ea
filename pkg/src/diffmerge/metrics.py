"""Sample-based discrepancy metrics.

* Mahalanobis distance between sample means, scaled by the reference
  covariance.
* Integrated absolute distance (IAD): mean over dimensions of half the L1
  distance between Gaussian-kernel KDEs of the 1-d marginals, integrated
  over the union of the 5-sigma intervals around each mean.
* Mean absolute skew deviation of the 1-d marginals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affine import sym_sqrt

GRID_POINTS = 2048


@dataclass(frozen=True)
class DiscrepancyReport:
    mahalanobis: float
    iad: float
    skew_dev: float
    n_approx: int
    n_ref: int
    per_dimension_iad: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mahalanobis": self.mahalanobis,
            "iad": self.iad,
            "skew": self.skew_dev,
            "n_approx": self.n_approx,
            "n_ref": self.n_ref,
            "per_dim_iad": [float(v) for v in self.per_dimension_iad],
        }


def mahalanobis(approx: np.ndarray, ref: np.ndarray) -> float:
    approx = np.atleast_2d(np.asarray(approx, dtype=float))
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    d = ref.shape[1]
    if ref.shape[0] < d + 1:
        raise ValueError("reference sample too small for a covariance estimate")
    diff = approx.mean(axis=0) - ref.mean(axis=0)
    cov = np.cov(ref, rowvar=False, ddof=1).reshape(d, d)
    _, inv_sqrt, _ = sym_sqrt(cov)
    return float(np.linalg.norm(inv_sqrt @ diff))


def silverman_bandwidth(x: np.ndarray) -> float:
    """Rule-of-thumb bandwidth 0.9 min(sd, IQR/1.34) n^{-1/5}."""
    n = x.size
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75.0, 25.0])
    spread = min(sd, (q75 - q25) / 1.34) or sd
    if spread <= 0.0:
        raise ValueError("degenerate (zero-variance) marginal")
    return 0.9 * spread * n ** (-0.2)


def kde_on_grid(x: np.ndarray, grid: np.ndarray,
                bandwidth: float | None = None) -> np.ndarray:
    """Gaussian-kernel density estimate evaluated on a grid."""
    x = np.asarray(x, dtype=float).ravel()
    h = silverman_bandwidth(x) if bandwidth is None else bandwidth
    norm = 1.0 / (x.size * h * np.sqrt(2.0 * np.pi))
    out = np.zeros_like(grid)
    # chunk the grid to keep the (grid x samples) kernel matrix bounded
    chunk = max(1, int(4e6 // max(x.size, 1)))
    for i in range(0, grid.size, chunk):
        g = grid[i:i + chunk]
        out[i:i + chunk] = np.exp(-0.5 * ((g[:, None] - x[None, :]) / h) ** 2).sum(axis=1)
    return norm * out


def _marginal_range(a: np.ndarray, f: np.ndarray):
    lo = min(a.mean() - 5.0 * a.std(ddof=1), f.mean() - 5.0 * f.std(ddof=1))
    hi = max(a.mean() + 5.0 * a.std(ddof=1), f.mean() + 5.0 * f.std(ddof=1))
    return lo, hi


def iad(approx: np.ndarray, ref: np.ndarray,
        n_grid: int = GRID_POINTS) -> tuple[float, np.ndarray]:
    """Returns (mean IAD, per-dimension IAD vector)."""
    approx = np.atleast_2d(np.asarray(approx, dtype=float))
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    if approx.shape[1] != ref.shape[1]:
        raise ValueError("dimension mismatch")
    d = approx.shape[1]
    per_dim = np.empty(d)
    for i in range(d):
        a, f = approx[:, i], ref[:, i]
        lo, hi = _marginal_range(a, f)
        grid = np.linspace(lo, hi, n_grid)
        diff = np.abs(kde_on_grid(a, grid) - kde_on_grid(f, grid))
        per_dim[i] = 0.5 * np.trapezoid(diff, grid)
    return float(per_dim.mean()), per_dim


def sample_skewness(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    mu = x.mean()
    sd = x.std()
    if sd == 0.0:
        raise ValueError("degenerate (zero-variance) marginal")
    return float(np.mean(((x - mu) / sd) ** 3))


def skew_deviation(approx: np.ndarray, ref: np.ndarray) -> float:
    approx = np.atleast_2d(np.asarray(approx, dtype=float))
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    vals = [abs(sample_skewness(ref[:, i]) - sample_skewness(approx[:, i]))
            for i in range(approx.shape[1])]
    return float(np.mean(vals))


def compute_report(approx: np.ndarray, ref: np.ndarray) -> DiscrepancyReport:
    approx = np.atleast_2d(np.asarray(approx, dtype=float))
    ref = np.atleast_2d(np.asarray(ref, dtype=float))
    mean_iad, per_dim = iad(approx, ref)
    return DiscrepancyReport(
        mahalanobis=mahalanobis(approx, ref),
        iad=mean_iad,
        skew_dev=skew_deviation(approx, ref),
        n_approx=approx.shape[0],
        n_ref=ref.shape[0],
        per_dimension_iad=per_dim,
    )
