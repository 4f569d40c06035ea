"""Command-line interface and experiment pipelines.

Subcommands: generate, shard, sample, train, merge, evaluate, run-experiment.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics
from .affine import SingularMatrixError, gaussian_product
from .energy import NonFiniteError
from .merge import MergedDensity, consensus_merge, gaussian_merge, swiss_merge
from .modelio import ModelFileError, load_model, save_model
from .samplers import (AnnealConfig, HmcConfig, NumericalError, annealed_sample,
                       hmc_sample)
from .sde import VpSchedule
from .targets import (DataError, Dataset, generate_toy, load_csv, map_estimate,
                      param_dim, shard_split, subposterior_target)
from .training import ShardDraws, TrainConfig, TrainingError, train_shard

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ALL_METHODS = ("diffusion", "diffusion-annealed", "consensus", "swiss", "gaussian")


class ConfigError(RuntimeError):
    pass


def _n_workers(n_tasks: int) -> int:
    cap = os.environ.get("DNC_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(cap, n_tasks))


# -- CSV helpers --------------------------------------------------------

def write_samples_csv(path, samples: np.ndarray, scores=None) -> None:
    samples = np.atleast_2d(samples)
    d = samples.shape[1]
    cols = [f"dim_{i}" for i in range(d)]
    mat = samples
    if scores is not None:
        cols += [f"score_{i}" for i in range(d)]
        mat = np.hstack([samples, np.atleast_2d(scores)])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        np.savetxt(fh, mat, fmt="%.17g", delimiter=",")


def read_samples_csv(path):
    """Returns (samples, scores-or-None)."""
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        mat = np.loadtxt(fh, delimiter=",", ndmin=2)
    n_dims = sum(1 for c in header if c.startswith("dim_"))
    if n_dims == 0:
        raise DataError(f"{path}: no dim_* columns in header")
    samples = mat[:, :n_dims]
    scores = mat[:, n_dims:] if mat.shape[1] > n_dims else None
    return samples, scores


def write_dataset_csv(path, data: Dataset) -> None:
    names = data.feature_names or [f"x{i}" for i in range(data.n_features)]
    with open(path, "w") as fh:
        fh.write(",".join(list(names) + ["y"]) + "\n")
        np.savetxt(fh, np.column_stack([data.features, data.response]),
                   fmt="%.17g", delimiter=",")


# -- experiment configuration -------------------------------------------

def load_experiment_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    for key in ("name", "data", "model", "n_shards", "output_dir"):
        if key not in cfg:
            raise ConfigError(f"{path}: missing required key {key!r}")
    methods = cfg.get("methods", list(ALL_METHODS))
    for m in methods:
        if m not in ALL_METHODS:
            raise ConfigError(f"unknown merge method {m!r}")
    cfg["methods"] = methods
    cfg.setdefault("seed", 0)
    cfg.setdefault("sde", {})
    cfg.setdefault("mcmc", {})
    cfg.setdefault("train", {})
    cfg.setdefault("anneal", {})
    return cfg


def _load_data(cfg: dict) -> Dataset:
    data_cfg = cfg["data"]
    if "generator" in data_cfg:
        return generate_toy(data_cfg["generator"], data_cfg.get("params"),
                            int(data_cfg.get("n", 1000)),
                            int(data_cfg.get("seed", cfg["seed"])))
    if "csv" in data_cfg:
        return load_csv(data_cfg["csv"], data_cfg.get("schema"))
    raise ConfigError("data spec needs either 'generator' or 'csv'")


def _hmc_config(cfg: dict, seed: int) -> HmcConfig:
    m = cfg["mcmc"]
    return HmcConfig(
        n_samples=int(m.get("n_samples", 10_000)),
        burn_in=int(m.get("burn_in", 100)),
        leapfrog_steps=int(m.get("leapfrog_steps", 10)),
        step_size=m.get("step_size", "adapt"),
        target_accept=float(m.get("target_accept", 0.8)),
        rng_seed=seed,
    )


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=int(t.get("epochs", 500)),
        batch_size=int(t.get("batch_size", 32)),
        step_size=float(t.get("step_size", 1e-3)),
        rng_seed=seed,
        t_floor=float(t.get("t_floor", 1e-5)),
        hidden_dim=int(t.get("hidden_dim", 32)),
        n_residual_blocks=int(t.get("n_residual_blocks", 1)),
        log_every=int(t.get("log_every", 0)),
    )


# -- parallel stage workers (top level, picklable arguments) -------------

def _sample_worker(args):
    kind, shard, n_shards, prior, cfg, seed = args
    target = subposterior_target(kind, shard, n_shards, prior)
    init = map_estimate(target, np.zeros(param_dim(kind, shard)))
    draws = hmc_sample(target, _hmc_config(cfg, seed), init)
    return draws.samples, draws.scores


def _train_worker(args):
    samples, scores, cfg, seed, label = args
    sched = VpSchedule(**cfg["sde"])
    model, amap = train_shard(ShardDraws(samples, scores),
                              _train_config(cfg, seed), sched, label=label)
    return model.params, model.config, amap


def _parallel_map(fn, jobs):
    workers = _n_workers(len(jobs))
    if workers == 1 or len(jobs) == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# -- pipeline ------------------------------------------------------------

def run_experiment(config_path) -> int:
    cfg = load_experiment_config(config_path)
    outdir = Path(cfg["output_dir"])
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"name": cfg["name"], "stages": []}

    def done(stage):
        manifest["stages"].append(stage)
        (outdir / "MANIFEST.json").write_text(json.dumps(manifest, indent=2) + "\n")

    kind = cfg["model"]["kind"]
    prior = cfg["model"].get("prior")
    seed = int(cfg["seed"])
    sched = VpSchedule(**cfg["sde"])
    stage = "data"
    try:
        data = _load_data(cfg)
        write_dataset_csv(outdir / "data.csv", data)
        done("data")

        stage = "reference"
        full_target = subposterior_target(kind, data, 1, prior)
        init = map_estimate(full_target, np.zeros(param_dim(kind, data)))
        ref_draws = hmc_sample(full_target, _hmc_config(cfg, seed + 1000), init)
        write_samples_csv(outdir / "reference_samples.csv", ref_draws.samples)
        done("reference")

        stage = "shard"
        n_shards = int(cfg["n_shards"])
        sharded = shard_split(data, n_shards, seed + 1)
        done("shard")

        stage = "subposterior-sampling"
        jobs = [(kind, sharded.shards[k], n_shards, prior, cfg, seed + 2000 + k)
                for k in range(n_shards)]
        shard_draws = _parallel_map(_sample_worker, jobs)
        for k, (samples, scores) in enumerate(shard_draws):
            write_samples_csv(outdir / f"shard_{k}_samples.csv", samples, scores)
        done("subposterior-sampling")

        stage = "training"
        need_models = any(m.startswith("diffusion") for m in cfg["methods"])
        shards = []
        if need_models:
            jobs = [(s, g, cfg, seed + 3000 + k, f"shard {k}")
                    for k, (s, g) in enumerate(shard_draws)]
            trained = _parallel_map(_train_worker, jobs)
            from .energy import EnergyModel
            for k, (params, net_cfg, amap) in enumerate(trained):
                model = EnergyModel(net_cfg, sched, params)
                save_model(outdir / f"shard_{k}_model.bin", model, amap)
                shards.append((model, amap))
        done("training")

        stage = "merge"
        n_merge = int(cfg.get("merge_samples", cfg["mcmc"].get("n_samples", 10_000)))
        merged = {}
        shard_mats = [s for s, _ in shard_draws]
        from .affine import fit_affine
        shard_gaussians = [fit_affine(m).to_gaussian() for m in shard_mats]
        md = MergedDensity.from_shards(shards) if shards else None
        for i, method in enumerate(cfg["methods"]):
            merged[method] = _run_merge(method, md, shard_mats, shard_gaussians,
                                        cfg, n_merge, seed + 4000 + i)
            write_samples_csv(outdir / f"merged_{method.replace('-', '_')}_samples.csv",
                              merged[method])
        done("merge")

        stage = "evaluate"
        report = {}
        for method, samples in merged.items():
            rep = metrics.compute_report(samples, ref_draws.samples)
            report[method] = rep.to_dict()
            _write_marginals(outdir / f"marginals_{method.replace('-', '_')}.csv",
                             samples, ref_draws.samples)
        (outdir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
        done("evaluate")
    except Exception as exc:
        manifest["failed_stage"] = stage
        manifest["error"] = str(exc)
        (outdir / "MANIFEST.json").write_text(json.dumps(manifest, indent=2) + "\n")
        raise
    return 0


def _run_merge(method, md, shard_mats, shard_gaussians, cfg, n_merge, seed):
    rng = np.random.default_rng(seed)
    if method == "consensus":
        return consensus_merge(shard_mats)
    if method == "swiss":
        return np.vstack(swiss_merge(shard_mats, shard_gaussians))
    if method == "gaussian":
        return gaussian_merge(shard_gaussians).sample(n_merge, rng)
    if md is None:
        raise ConfigError(f"method {method!r} requires trained models")
    if method == "diffusion":
        mass = np.asarray(md.prior.precision) if cfg.get("precondition") else None
        hmc = _hmc_config(cfg, seed)
        hmc = HmcConfig(n_samples=n_merge, burn_in=hmc.burn_in,
                        leapfrog_steps=hmc.leapfrog_steps,
                        step_size=hmc.step_size, target_accept=hmc.target_accept,
                        mass_matrix=mass, rng_seed=seed)
        target = md.at_time(0.0)
        from .samplers import TargetDensity
        td = TargetDensity(target.log_density, target.grad_log_density)
        draws = hmc_sample(td, hmc, md.prior.mean.copy())
        return draws.samples
    if method == "diffusion-annealed":
        a = cfg["anneal"]
        anneal = AnnealConfig(
            n_particles=int(a.get("n_particles", n_merge)),
            n_outer=int(a.get("n_outer", 300)),
            n_inner=int(a.get("n_inner", 1)),
            leapfrog_steps=int(a.get("leapfrog_steps", 3)),
            step_size=a.get("step_size"),
            rng_seed=seed,
        )
        return annealed_sample(md, anneal)
    raise ConfigError(f"unknown merge method {method!r}")


def _write_marginals(path, approx, ref, n_grid=512):
    approx = np.atleast_2d(approx)
    ref = np.atleast_2d(ref)
    rows = []
    for i in range(approx.shape[1]):
        lo, hi = metrics._marginal_range(approx[:, i], ref[:, i])
        grid = np.linspace(lo, hi, n_grid)
        da = metrics.kde_on_grid(approx[:, i], grid)
        df = metrics.kde_on_grid(ref[:, i], grid)
        rows.append(np.column_stack([np.full(n_grid, i), grid, da, df]))
    with open(path, "w") as fh:
        fh.write("dim,theta,density_approx,density_reference\n")
        np.savetxt(fh, np.vstack(rows), fmt="%.17g", delimiter=",")


# -- subcommands ----------------------------------------------------------

def _cmd_generate(args):
    params = json.loads(args.params) if args.params else None
    data = generate_toy(args.kind, params, args.n, args.seed)
    write_dataset_csv(args.out, data)
    return 0


def _cmd_shard(args):
    data = load_csv(args.data, {"response": args.response} if args.response else None)
    sharded = shard_split(data, args.n_shards, args.seed)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for k, shard in enumerate(sharded.shards):
        write_dataset_csv(outdir / f"shard_{k}.csv", shard)
    np.savetxt(outdir / "assignment.csv", sharded.assignment, fmt="%d")
    return 0


def _cmd_sample(args):
    data = load_csv(args.data, {"response": args.response} if args.response else None)
    prior = json.loads(args.prior) if args.prior else None
    target = subposterior_target(args.kind, data, args.n_shards, prior)
    init = map_estimate(target, np.zeros(param_dim(args.kind, data)))
    config = HmcConfig(n_samples=args.n_samples, burn_in=args.burn_in,
                       leapfrog_steps=args.leapfrog_steps, rng_seed=args.seed)
    draws = hmc_sample(target, config, init)
    write_samples_csv(args.out, draws.samples, draws.scores)
    return 0


def _cmd_train(args):
    samples, scores = read_samples_csv(args.draws)
    if scores is None:
        raise DataError(f"{args.draws}: training needs score columns")
    sched = VpSchedule(args.beta_min, args.beta_max)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         step_size=args.step_size, rng_seed=args.seed,
                         hidden_dim=args.hidden_dim,
                         n_residual_blocks=args.blocks, log_every=args.log_every)
    model, amap = train_shard(ShardDraws(samples, scores), config, sched)
    save_model(args.out, model, amap)
    return 0


def _cmd_merge(args):
    if args.method in ("diffusion", "diffusion-annealed"):
        if not args.models:
            raise ConfigError("diffusion merges need --models")
        shards = [load_model(p) for p in args.models]
        md = MergedDensity.from_shards(shards)
        if args.method == "diffusion":
            from .samplers import TargetDensity
            fixed = md.at_time(0.0)
            td = TargetDensity(fixed.log_density, fixed.grad_log_density)
            config = HmcConfig(n_samples=args.n_samples, burn_in=args.burn_in,
                               rng_seed=args.seed)
            out = hmc_sample(td, config, md.prior.mean.copy()).samples
        else:
            config = AnnealConfig(n_particles=args.n_samples,
                                  n_outer=args.n_outer, n_inner=args.n_inner,
                                  rng_seed=args.seed)
            out = annealed_sample(md, config)
    else:
        if not args.draws:
            raise ConfigError(f"method {args.method!r} needs --draws")
        mats = [read_samples_csv(p)[0] for p in args.draws]
        from .affine import fit_affine
        gaussians = [fit_affine(m).to_gaussian() for m in mats]
        if args.method == "consensus":
            out = consensus_merge(mats)
        elif args.method == "swiss":
            out = np.vstack(swiss_merge(mats, gaussians))
        elif args.method == "gaussian":
            rng = np.random.default_rng(args.seed)
            out = gaussian_merge(gaussians).sample(args.n_samples, rng)
        else:
            raise ConfigError(f"unknown method {args.method!r}")
    write_samples_csv(args.out, out)
    return 0


def _cmd_evaluate(args):
    approx, _ = read_samples_csv(args.approx)
    ref, _ = read_samples_csv(args.ref)
    if approx.shape[1] != ref.shape[1]:
        raise DataError(f"dimension mismatch: {approx.shape[1]} vs {ref.shape[1]}")
    report = metrics.compute_report(approx, ref)
    json.dump(report.to_dict(), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffmerge")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset CSV")
    p.add_argument("--kind", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", help="generator parameters as JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("shard", help="split a dataset CSV into shards")
    p.add_argument("--data", required=True)
    p.add_argument("--n-shards", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--response")
    p.add_argument("--outdir", required=True)
    p.set_defaults(fn=_cmd_shard)

    p = sub.add_parser("sample", help="HMC draws plus scores for one shard")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--n-shards", type=int, required=True)
    p.add_argument("--prior", help="prior parameters as JSON")
    p.add_argument("--response")
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--leapfrog-steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("train", help="train a shard energy model")
    p.add_argument("--draws", required=True)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--step-size", type=float, default=1e-3)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--beta-min", type=float, default=0.1)
    p.add_argument("--beta-max", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("merge", help="merge shard draws or models")
    p.add_argument("--method", required=True, choices=ALL_METHODS)
    p.add_argument("--draws", nargs="*")
    p.add_argument("--models", nargs="*")
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--burn-in", type=int, default=100)
    p.add_argument("--n-outer", type=int, default=300)
    p.add_argument("--n-inner", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_merge)

    p = sub.add_parser("evaluate", help="discrepancy report for two sample CSVs")
    p.add_argument("--approx", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("run-experiment", help="full pipeline from a JSON config")
    p.add_argument("config")
    p.set_defaults(fn=lambda a: run_experiment(a.config))

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, TrainingError, NonFiniteError, SingularMatrixError,
            ModelFileError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
