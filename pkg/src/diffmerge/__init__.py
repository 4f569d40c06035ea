"""Divide-and-conquer MCMC posterior merging with diffusion energy models."""

from .affine import (AffineMap, GaussianApprox, fit_affine, gaussian_product,
                     score_sum_mismatch, standardize)
from .energy import EnergyModel, NetConfig
from .merge import (MergedDensity, consensus_merge, gaussian_merge,
                    merged_log_density, swiss_merge)
from .metrics import DiscrepancyReport, compute_report, iad, mahalanobis, skew_deviation
from .samplers import AnnealConfig, HmcConfig, TargetDensity, annealed_sample, hmc_sample
from .sde import VpSchedule
from .targets import (Dataset, ShardedDataset, generate_toy, load_csv,
                      shard_split, subposterior_target)
from .training import ShardDraws, TrainConfig, train_shard

__all__ = [
    "AffineMap", "GaussianApprox", "fit_affine", "gaussian_product",
    "score_sum_mismatch", "standardize", "EnergyModel", "NetConfig",
    "MergedDensity", "consensus_merge", "gaussian_merge", "merged_log_density",
    "swiss_merge", "DiscrepancyReport", "compute_report", "iad", "mahalanobis",
    "skew_deviation", "AnnealConfig", "HmcConfig", "TargetDensity",
    "annealed_sample", "hmc_sample", "VpSchedule", "Dataset", "ShardedDataset",
    "generate_toy", "load_csv", "shard_split", "subposterior_target",
    "ShardDraws", "TrainConfig", "train_shard",
]

__version__ = "0.1.0"
