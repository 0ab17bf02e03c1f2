"""``robustcov`` command-line interface.

Every subcommand reads a YAML config and writes its outputs into ``--out``.
Exit status: 0 on success, 1 on configuration errors, 2 when some benchmark
cells or estimators failed.
"""
import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .bench import ExperimentConfig, run_experiment, write_results
from .estimators import EstimatorConfig, estimate
from .exceptions import ConfigurationError, RobustCovError
from .impute import ImputeConfig, em_eof_impute
from .missing import IncompleteMatrix, PatternSpec, apply_pattern, read_csv, write_csv
from .simulate import SimConfig, corrupt_wgn, make_rng, sample_haystack, sample_msg

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

logger = logging.getLogger("robustcov")


def _load(path):
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a mapping")
    return cfg


def _take(cfg, keys, where):
    unknown = sorted(set(cfg) - set(keys))
    if unknown:
        raise ConfigurationError(f"unknown keys in {where} config: {unknown}")


def _input_path(cfg, key, base):
    if key not in cfg:
        raise ConfigurationError(f"missing required key {key!r}")
    path = Path(cfg[key])
    return path if path.is_absolute() else base / path


def _write_matrix(path, m):
    np.savetxt(path, np.asarray(m), delimiter=",", fmt="%.17g")


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


SIMULATE_KEYS = {"model", "p", "n", "rho", "alpha", "snr_sigma2", "rank", "pattern", "outlier_ratio",
                 "sigma_wgn", "sigma_s2", "sigma_o2", "subspace_dim", "seed"}


def cmd_simulate(cfg, args, base, out):
    _take(cfg, SIMULATE_KEYS, "simulate")
    model = cfg.get("model", "msg")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    rng = make_rng(seed)
    pattern = PatternSpec(**cfg.get("pattern", {"kind": "general", "target_ratio": 0.0}))
    meta = {"model": model, "seed": seed}
    if model == "msg":
        sim = SimConfig(**{k: cfg[k] for k in ("p", "n", "rho", "alpha", "snr_sigma2", "rank") if k in cfg},
                        outlier_ratio=cfg.get("outlier_ratio", 0.0), sigma_wgn=cfg.get("sigma_wgn", 0.0), seed=seed)
        cov = sim.covariance()
        y, tau = sample_msg(cov, sim.n, sim.alpha, rng)
        clean = y
        if sim.outlier_ratio > 0:
            y, idx = corrupt_wgn(y, sim.outlier_ratio, sim.sigma_wgn * np.sqrt(np.trace(cov) / sim.p), rng)
            meta["outliers"] = idx.tolist()
        meta["textures"] = tau.tolist()
        _write_matrix(out / "covariance.csv", cov)
    elif model == "haystack":
        y, is_out, u = sample_haystack(cfg.get("p", 15), cfg.get("n", 200), cfg.get("subspace_dim", 5),
                                       cfg.get("sigma_s2", 10.0), cfg.get("sigma_o2", 0.0),
                                       cfg.get("outlier_ratio", 0.0), rng)
        clean = y
        meta["outliers"] = np.flatnonzero(is_out).tolist()
        _write_matrix(out / "subspace.csv", u)
    else:
        raise ConfigurationError(f"unknown model {model!r}; expected 'msg' or 'haystack'")
    data = apply_pattern(y, pattern, rng)
    write_csv(data, out / "data.csv")
    write_csv(IncompleteMatrix.complete(clean), out / "clairvoyant.csv")
    meta["missing_ratio"] = float(data.missing_ratio)
    _dump(out / "meta.json", meta)
    return EXIT_OK


ESTIMATE_KEYS = {"input", "clairvoyant", "estimator", "rank", "estimator_config", "seed"}


def cmd_estimate(cfg, args, base, out):
    _take(cfg, ESTIMATE_KEYS, "estimate")
    data = read_csv(_input_path(cfg, "input", base))
    clair = None
    if "clairvoyant" in cfg:
        clair = read_csv(_input_path(cfg, "clairvoyant", base)).values
    econf = EstimatorConfig(**cfg.get("estimator_config", {}))
    seed = args.seed if args.seed is not None else cfg.get("seed")
    name = cfg.get("estimator", "em_tyl")
    est = estimate(name, data, clairvoyant=clair, rank=cfg.get("rank"), config=econf, rng=make_rng(seed))
    _write_matrix(out / "sigma.csv", est.sigma)
    _dump(out / "estimate.json", {
        "estimator": name,
        "textures": np.asarray(est.textures).tolist(),
        "iterations": int(est.iterations),
        "trace": [float(v) for v in est.trace],
        "converged": bool(est.converged),
    })
    return EXIT_OK


IMPUTE_KEYS = {"input", "impute", "seed"}


def cmd_impute(cfg, args, base, out):
    _take(cfg, IMPUTE_KEYS, "impute")
    data = read_csv(_input_path(cfg, "input", base))
    opts = dict(cfg.get("impute", {}))
    if args.seed is not None:
        opts["seed"] = args.seed
    elif "seed" in cfg:
        opts.setdefault("seed", cfg["seed"])
    icfg = ImputeConfig(**opts)
    res = em_eof_impute(data, icfg)
    write_csv(IncompleteMatrix.complete(res.completed), out / "completed.csv")
    report = res.report.to_dict()
    report.update(converged=bool(res.converged), iterations=int(res.iterations), config=asdict(icfg))
    _dump(out / "cv_report.json", report)
    return EXIT_OK


def _bench(experiment=None):
    def run(cfg, args, base, out):
        if experiment is not None:
            if cfg.setdefault("experiment", experiment) != experiment:
                raise ConfigurationError(f"this subcommand runs {experiment!r}, config says {cfg['experiment']!r}")
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads is not None:
            cfg["threads"] = args.threads
        ecfg = ExperimentConfig.from_dict(cfg)
        result = run_experiment(ecfg)
        write_results(result, ecfg, out)
        logger.info("%d rows, %d failures written to %s", len(result.rows), len(result.failures), out)
        return EXIT_PARTIAL if result.failures else EXIT_OK
    return run


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "benchmark": _bench(),
    "impute": cmd_impute,
    "classify": _bench("classify"),
    "cluster": _bench("cluster"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="robustcov", description="Robust covariance estimation with missing data.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--threads", type=int, default=None, help="worker processes for benchmarks")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    config_path = Path(args.config)
    out = Path(args.out)
    try:
        cfg = _load(config_path)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, config_path.parent, out)
    except (ConfigurationError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RobustCovError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, OSError) else EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
