"""Monte-Carlo benchmark harness for the simulation and descriptor experiments.

Every (grid point, replicate) cell draws from its own counter-based stream
(:func:`robustcov.simulate.cell_rng`), so results do not depend on how cells
are scheduled across workers. Results are written as a long-format CSV whose
bytes depend only on the configuration and the master seed; wall-clock times
go to a separate file.
"""
import csv
import hashlib
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .estimators import ESTIMATOR_NAMES, EstimatorConfig, estimate, normalize_shape
from .exceptions import ConfigurationError, RobustCovError
from .impute import FINAL_ESTIMATORS, ImputeConfig, em_eof_impute
from .linalg import geodesic_distance_sq
from .missing import IncompleteMatrix, PatternSpec, apply_pattern, make_mask
from .simulate import cell_rng, corrupt_wgn, lowrank_cov, sample_haystack, sample_msg, toeplitz_scatter
from .spdml import (
    DESCRIPTOR_ESTIMATORS, ClassSpec, clustering_accuracy, default_classes, descriptor_from_window,
    image_windows, kmeanspp_spd, mask_bands, mdrm_predict, mdrm_train, overall_accuracy,
    sample_class_window, stripe_image, stripe_mask, successive_bands,
)

logger = logging.getLogger(__name__)

EXPERIMENTS = ("pattern_sweep", "outlier_mask", "haystack_impute", "classify", "cluster")
_CODES = {name: i + 1 for i, name in enumerate(EXPERIMENTS)}

N_GRID = (63, 109, 190, 331, 575, 1000)
RATIO_GRID = (0.44, 0.22, 0.11, 0.05, 0.02, 0.01)

DEFAULT_ESTIMATORS = {
    "pattern_sweep": ["tyl_clair", "em_tyl", "tyl_obs", "em_scm", "scm_clair", "rmi", "mean_tyl"],
    "outlier_mask": ["scm_clair", "tyl_clair", "tyl_clair_corrupted", "em_tyl_masked", "tyl_obs_masked"],
    "haystack_impute": ["em_tyl_r", "scm", "rmi_r"],
    "classify": ["em_scm", "em_tyl+gm", "rsi"],
    "cluster": ["em_scm", "em_scm_r", "em_tyl", "em_tyl_r", "rsi", "rsi_r"],
}
OUTLIER_ESTIMATORS = ("scm_clair", "tyl_clair", "tyl_clair_corrupted", "em_tyl_masked", "tyl_obs_masked")

CSV_COLUMNS = ("experiment", "estimator", "n", "pattern", "ratio", "setting", "replicate", "metric", "value")


@dataclass
class ExperimentConfig:
    """Benchmark description; every field maps to a key of the YAML config.

    Only the fields relevant to ``experiment`` are read.
    """

    experiment: str = "pattern_sweep"
    replicates: int = 100
    seed: int = 0
    estimators: Optional[list] = None
    estimator_config: dict = field(default_factory=dict)
    threads: int = 1
    # simulation model
    p: int = 15
    rho: float = 0.7
    alpha: float = 1.0
    snr_sigma2: float = 10.0
    rank: Optional[int] = None
    # pattern_sweep
    n_grid: list = field(default_factory=lambda: list(N_GRID))
    ratio_grid: list = field(default_factory=lambda: list(RATIO_GRID))
    patterns: list = field(default_factory=lambda: ["general"])
    pattern_options: dict = field(default_factory=dict)
    # outlier_mask / haystack_impute
    n: int = 200
    outlier_ratios: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    sigma_wgn_grid: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0])
    outlier_unit: str = "samples"
    sigma_s2: float = 10.0
    sigma_o2_grid: list = field(default_factory=lambda: [0.0, 15.0, 30.0])
    subspace_dim: int = 5
    missing_ratio: float = 0.3
    impute: dict = field(default_factory=dict)
    # classify / cluster
    n_classes: int = 4
    class_rhos: Optional[list] = None
    class_alphas: Optional[list] = None
    window_samples: int = 51
    train_per_class: int = 10
    test_per_class: int = 10
    band_counts: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5])
    band_fraction: float = 1.0
    window: int = 7
    image_grid: list = field(default_factory=lambda: [6, 6])
    stripe_columns: int = 6
    kmeans_max_iter: int = 50
    kmeans_restarts: int = 10
    descriptor_rank: int = 5

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**d)

    def resolved_estimators(self):
        return list(self.estimators) if self.estimators else list(DEFAULT_ESTIMATORS[self.experiment])

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if int(self.replicates) < 1:
            raise ConfigurationError("replicates must be >= 1")
        if int(self.kmeans_restarts) < 1:
            raise ConfigurationError("kmeans_restarts must be >= 1")
        if int(self.threads) < 1:
            raise ConfigurationError("threads must be >= 1")
        if self.rank is not None and not 1 <= self.rank < self.p:
            raise ConfigurationError("rank must satisfy 1 <= rank < p")
        known = {
            "pattern_sweep": ESTIMATOR_NAMES,
            "outlier_mask": OUTLIER_ESTIMATORS,
            "haystack_impute": FINAL_ESTIMATORS,
            "classify": DESCRIPTOR_ESTIMATORS,
            "cluster": DESCRIPTOR_ESTIMATORS,
        }[self.experiment]
        for name in self.resolved_estimators():
            base = name[:-3] if name.endswith("+gm") else name
            if base not in known:
                raise ConfigurationError(f"estimator {name!r} is not registered for {self.experiment}")
            if self.experiment == "pattern_sweep" and base.endswith("_r") and self.rank is None:
                raise ConfigurationError(f"{name} needs 'rank'")
        if self.experiment == "pattern_sweep" and len(self.n_grid) != len(self.ratio_grid):
            raise ConfigurationError("n_grid and ratio_grid must have equal length")
        if self.outlier_unit not in ("samples", "entries"):
            raise ConfigurationError("outlier_unit must be 'samples' or 'entries'")
        try:
            EstimatorConfig(**self.estimator_config)
            ImputeConfig(**self.impute)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        d["estimators"] = self.resolved_estimators()
        return d

    def digest(self):
        """SHA-256 of the canonical JSON form (threads excluded: it cannot change results)."""
        d = self.to_dict()
        d.pop("threads")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class ResultRow:
    experiment: str
    estimator: str
    n: int
    pattern: str
    ratio: float
    setting: str
    replicate: int
    metric: str
    value: float
    wall_time: float = 0.0

    def key(self):
        return (self.experiment, self.estimator, self.n, self.pattern, self.setting, self.replicate, self.metric)


@dataclass
class FailedRow:
    experiment: str
    estimator: str
    n: int
    pattern: str
    setting: str
    replicate: int
    error: str


@dataclass
class BenchResult:
    rows: list
    failures: list

    def means(self, metric=None):
        """Mean value and effective count per (estimator, n, pattern, setting)."""
        acc = {}
        for r in self.rows:
            if metric is None or r.metric == metric:
                acc.setdefault((r.estimator, r.n, r.pattern, r.setting), []).append(r.value)
        return {k: (float(np.mean(v)), len(v)) for k, v in acc.items()}


class _Cell:
    """Collects rows for one (grid point, replicate) cell."""

    def __init__(self, experiment, n, pattern, setting, replicate):
        self.base = dict(experiment=experiment, n=int(n), pattern=pattern, setting=setting, replicate=int(replicate))
        self.rows = []
        self.failures = []

    def run(self, estimator, ratio, metric, fn):
        t0 = time.perf_counter()
        try:
            value = float(fn())
            if not math.isfinite(value):
                raise RobustCovError(f"non-finite {metric}")
        except (RobustCovError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            logger.info("%s failed in %s: %s", estimator, self.base, exc)
            self.failures.append(FailedRow(estimator=estimator, error=f"{type(exc).__name__}: {exc}", **self.base))
            return None
        self.rows.append(ResultRow(estimator=estimator, ratio=float(ratio), metric=metric, value=value,
                                   wall_time=time.perf_counter() - t0, **self.base))
        return value


def _err(truth_n, sigma):
    return geodesic_distance_sq(truth_n, normalize_shape(sigma)[0])


def _est_config(cfg):
    return EstimatorConfig(**cfg.estimator_config)


# ---------------------------------------------------------------------------
# Cell workers (module-level so they pickle for process pools)
# ---------------------------------------------------------------------------

def _pattern_cell(cfg, gi, pattern, rep):
    code = _CODES["pattern_sweep"]
    n, ratio = int(cfg.n_grid[gi]), float(cfg.ratio_grid[gi])
    pi = cfg.patterns.index(pattern)
    rng = cell_rng(cfg.seed, code, gi, pi, rep, 0)
    scatter = toeplitz_scatter(cfg.p, cfg.rho)
    truth = scatter if cfg.rank is None else lowrank_cov(scatter, cfg.rank, cfg.snr_sigma2)[0]
    truth_n = normalize_shape(truth)[0]
    y, _ = sample_msg(truth, n, cfg.alpha, rng)
    spec = PatternSpec(pattern, 0.0 if pattern == "monotone" else ratio, **cfg.pattern_options)
    data = apply_pattern(y, spec, rng)
    realized = float(data.missing_ratio)
    cell = _Cell("pattern_sweep", n, pattern, f"target_ratio={ratio!r}", rep)
    econf = _est_config(cfg)
    for ei, name in enumerate(cfg.resolved_estimators()):
        erng = cell_rng(cfg.seed, code, gi, pi, rep, 1 + ei)
        cell.run(name, realized, "geodesic_error",
                 lambda: _err(truth_n, estimate(name, data, clairvoyant=y, rank=cfg.rank, config=econf, rng=erng).sigma))
    return cell


def _outlier_cell(cfg, gi, rep):
    code = _CODES["outlier_mask"]
    ratio = float(cfg.outlier_ratios[gi])
    scatter = toeplitz_scatter(cfg.p, cfg.rho)
    truth = scatter if cfg.rank is None else lowrank_cov(scatter, cfg.rank, cfg.snr_sigma2)[0]
    truth_n = normalize_shape(truth)[0]
    # the clean data are shared by every ratio of one replicate
    y, _ = sample_msg(truth, cfg.n, cfg.alpha, cell_rng(cfg.seed, code, 0, rep))
    signal_std = math.sqrt(np.trace(truth) / cfg.p)
    names = cfg.resolved_estimators()
    econf = _est_config(cfg)
    setting = f"outlier_ratio={ratio!r}"
    cell = _Cell("outlier_mask", cfg.n, cfg.outlier_unit, setting, rep)
    # corruption layout: same stream for every sigma_wgn so only the scale changes
    layout_key = (cfg.seed, code, 1 + gi, rep)

    if cfg.outlier_unit == "samples":
        _, idx = corrupt_wgn(y, ratio, 0.0, cell_rng(*layout_key))
        keep = np.setdiff1d(np.arange(cfg.n), idx)
        masked = IncompleteMatrix.complete(y[:, keep])
        out_mask = np.zeros(y.shape, dtype=bool)
        out_mask[:, idx] = True
    else:
        obs = make_mask(cfg.p, cfg.n, PatternSpec("general", ratio), cell_rng(*layout_key))
        masked = IncompleteMatrix(y, obs)
        out_mask = ~obs

    if gi == 0:
        clean = _Cell("outlier_mask", cfg.n, cfg.outlier_unit, "clean", rep)
        for name in ("scm_clair", "tyl_clair"):
            if name in names:
                clean.run(name, 0.0, "geodesic_error",
                          lambda: _err(truth_n, estimate(name, masked, clairvoyant=y, config=econf).sigma))
        cell.rows += clean.rows
        cell.failures += clean.failures
    if "em_tyl_masked" in names:
        cell.run("em_tyl_masked", ratio, "geodesic_error",
                 lambda: _err(truth_n, estimate("em_tyl", masked, config=econf).sigma))
    if "tyl_obs_masked" in names:
        cell.run("tyl_obs_masked", ratio, "geodesic_error",
                 lambda: _err(truth_n, estimate("tyl_obs", masked, config=econf).sigma))
    if "tyl_clair_corrupted" in names:
        noise = cell_rng(cfg.seed, code, 1 + gi, rep, 1).standard_normal(y.shape)
        for s in cfg.sigma_wgn_grid:
            yc = y + float(s) * signal_std * np.where(out_mask, noise, 0.0)
            sub = _Cell("outlier_mask", cfg.n, cfg.outlier_unit, f"{setting};sigma_wgn={float(s)!r}", rep)
            sub.run("tyl_clair_corrupted", ratio, "geodesic_error",
                    lambda: _err(truth_n, estimate("tyl_clair", masked, clairvoyant=yc, config=econf).sigma))
            cell.rows += sub.rows
            cell.failures += sub.failures
    return cell


def _haystack_cell(cfg, oi, ri, rep):
    code = _CODES["haystack_impute"]
    so2 = float(cfg.sigma_o2_grid[oi])
    ratio = float(cfg.outlier_ratios[ri])
    rng = cell_rng(cfg.seed, code, oi, ri, rep, 0)
    y, _, _ = sample_haystack(cfg.p, cfg.n, cfg.subspace_dim, cfg.sigma_s2, so2, ratio, rng)
    data = apply_pattern(y, PatternSpec("general", cfg.missing_ratio, **cfg.pattern_options), rng)
    cv_seed = cell_rng(cfg.seed, code, oi, ri, rep, 1)
    cv_seed = int(cv_seed.integers(2 ** 63))
    setting = f"sigma_o2={so2!r};outlier_ratio={ratio!r}"
    cell = _Cell("haystack_impute", cfg.n, "general", setting, rep)
    opts = {"k": cfg.subspace_dim, **cfg.impute}
    for ei, name in enumerate(cfg.resolved_estimators()):
        icfg = ImputeConfig(**{**opts, "final_estimator": name, "seed": cv_seed + 1 + ei})
        cell.run(name, float(data.missing_ratio), "cv_rmse",
                 lambda: em_eof_impute(data, icfg, seed=cv_seed).report.rmse)
    return cell


def _classes(cfg):
    classes = default_classes(cfg.n_classes)
    if cfg.class_rhos is not None:
        if len(cfg.class_rhos) != cfg.n_classes:
            raise ConfigurationError("class_rhos must have n_classes entries")
        classes = [ClassSpec(float(r)) for r in cfg.class_rhos]
    if cfg.class_alphas is not None:
        if len(cfg.class_alphas) != cfg.n_classes:
            raise ConfigurationError("class_alphas must have n_classes entries")
        classes = [ClassSpec(c.rho, float(a)) for c, a in zip(classes, cfg.class_alphas)]
    return classes


def _descriptor(name, window, cfg, rng, label=None, window_id=None):
    base, rescale = (name[:-3], True) if name.endswith("+gm") else (name, False)
    rank = cfg.rank if cfg.rank is not None else cfg.descriptor_rank
    return descriptor_from_window(window, base, rank=rank, rescale=rescale, config=_est_config(cfg),
                                  label=label, window_id=window_id, seed=rng)


def _classify_cell(cfg, rep):
    code = _CODES["classify"]
    classes = _classes(cfg)
    rng = cell_rng(cfg.seed, code, rep, 0)
    p, nw = cfg.p, cfg.window_samples
    train = [(c, sample_class_window(spec, p, nw, rng)) for c, spec in enumerate(classes) for _ in range(cfg.train_per_class)]
    test = [(c, sample_class_window(spec, p, nw, rng)) for c, spec in enumerate(classes) for _ in range(cfg.test_per_class)]
    starts = rng.integers(p, size=len(test))
    cell = _Cell("classify", nw, "bands", "", rep)
    for ei, name in enumerate(cfg.resolved_estimators()):
        erng = cell_rng(cfg.seed, code, rep, 1 + ei)
        try:
            model = mdrm_train([_descriptor(name, IncompleteMatrix.complete(w), cfg, erng, c) for c, w in train])
        except RobustCovError as exc:
            cell.failures.append(FailedRow(estimator=name, error=f"training: {exc}", **cell.base))
            continue
        for m in cfg.band_counts:
            sub = _Cell("classify", nw, "bands", f"bands={int(m)}", rep)
            mrng = cell_rng(cfg.seed, code, rep, 0, 1 + int(m))
            masked = [mask_bands(w, successive_bands(p, int(m), int(s)), cfg.band_fraction, mrng)
                      for (_, w), s in zip(test, starts)]
            ratio = float(np.mean([1 - d.mask.mean() for d in masked]))
            truth = [c for c, _ in test]
            sub.run(name, ratio, "overall_accuracy",
                    lambda: overall_accuracy(truth, [mdrm_predict(model, _descriptor(name, d, cfg, erng)) for d in masked]))
            cell.rows += sub.rows
            cell.failures += sub.failures
    return cell


def _cluster_cell(cfg, rep):
    code = _CODES["cluster"]
    classes = _classes(cfg)
    rng = cell_rng(cfg.seed, code, rep, 0)
    img, labels = stripe_image(classes, cfg.p, cfg.window, tuple(cfg.image_grid), rng)
    img = img - img.reshape(cfg.p, -1).mean(axis=1)[:, None, None]
    truth = labels.reshape(-1)
    starts = int(rng.integers(cfg.p))
    max_bands = max(int(m) for m in cfg.band_counts)
    order = successive_bands(cfg.p, max_bands, starts)
    full_mask = stripe_mask(img.shape, order, cfg.stripe_columns, rng)
    cell = _Cell("cluster", cfg.window ** 2, "stripes", "", rep)
    for m in cfg.band_counts:
        mask = np.ones(img.shape, dtype=bool)
        for b in order[:int(m)]:
            mask[b] = full_mask[b]
        windows = image_windows(img, mask, cfg.window)
        ratio = float(1 - mask.mean())
        for ei, name in enumerate(cfg.resolved_estimators()):
            drng = cell_rng(cfg.seed, code, rep, 1 + ei, 1 + int(m))
            # same seeding stream for every band count so only the mask changes
            krng = cell_rng(cfg.seed, code, rep, 1 + ei, 0)
            sub = _Cell("cluster", cfg.window ** 2, "stripes", f"bands={int(m)}", rep)

            def run():
                desc = [_descriptor(name, w, cfg, drng, window_id=wi) for wi, w in enumerate(windows)]
                runs = [kmeanspp_spd(desc, cfg.n_classes, seed=krng, max_iter=cfg.kmeans_max_iter)
                        for _ in range(int(cfg.kmeans_restarts))]
                best = min(runs, key=lambda res: res.objective[-1])
                return clustering_accuracy(truth, best.assignments)

            sub.run(name, ratio, "overall_accuracy", run)
            cell.rows += sub.rows
            cell.failures += sub.failures
    return cell


def _tasks(cfg):
    reps = range(int(cfg.replicates))
    if cfg.experiment == "pattern_sweep":
        return [(_pattern_cell, (cfg, gi, pat, r)) for gi in range(len(cfg.n_grid)) for pat in cfg.patterns for r in reps]
    if cfg.experiment == "outlier_mask":
        return [(_outlier_cell, (cfg, gi, r)) for gi in range(len(cfg.outlier_ratios)) for r in reps]
    if cfg.experiment == "haystack_impute":
        return [(_haystack_cell, (cfg, oi, ri, r)) for oi in range(len(cfg.sigma_o2_grid))
                for ri in range(len(cfg.outlier_ratios)) for r in reps]
    if cfg.experiment == "classify":
        return [(_classify_cell, (cfg, r)) for r in reps]
    return [(_cluster_cell, (cfg, r)) for r in reps]


def _call(task):
    fn, args = task
    try:
        return fn(*args)
    except RobustCovError as exc:
        # a whole cell failed before any estimator ran (e.g. data generation)
        cell = _Cell(args[0].experiment, 0, "", "", args[-1])
        cell.failures.append(FailedRow(estimator="*", error=f"{type(exc).__name__}: {exc}", **cell.base))
        logger.debug("%s", traceback.format_exc())
        return cell


def run_experiment(cfg, threads=None):
    """Run every cell of ``cfg`` and return a :class:`BenchResult`.

    Rows come back in task order whatever the number of worker processes.
    """
    cfg.validate()
    tasks = _tasks(cfg)
    workers = int(threads or cfg.threads)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_call, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    else:
        cells = [_call(t) for t in tasks]
    rows = [r for c in cells for r in c.rows]
    failures = [f for c in cells for f in c.failures]
    keys = [r.key() for r in rows]
    if len(set(keys)) != len(keys):
        raise RuntimeError("duplicate result keys")
    return BenchResult(rows, failures)


def run_pattern_sweep(cfg, threads=None):
    return run_experiment(_as(cfg, "pattern_sweep"), threads)


def run_outlier_mask(cfg, threads=None):
    return run_experiment(_as(cfg, "outlier_mask"), threads)


def run_haystack_impute(cfg, threads=None):
    return run_experiment(_as(cfg, "haystack_impute"), threads)


def run_classify(cfg, threads=None):
    return run_experiment(_as(cfg, "classify"), threads)


def run_cluster(cfg, threads=None):
    return run_experiment(_as(cfg, "cluster"), threads)


def _as(cfg, experiment):
    if cfg.experiment != experiment:
        raise ConfigurationError(f"config is for {cfg.experiment!r}, not {experiment!r}")
    return cfg


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_results(result, cfg, out_dir):
    """Write results.csv, timings.csv, failures.csv and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in result.rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("experiment", "estimator", "n", "pattern", "setting", "replicate", "metric", "wall_time"))
        for r in result.rows:
            w.writerow([_fmt(v) for v in r.key()] + [f"{r.wall_time:.6f}"])
    with open(out / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = [f.name for f in fields(FailedRow)]
        w.writerow(cols)
        for f in result.failures:
            w.writerow([_fmt(getattr(f, c)) for c in cols])
    manifest = {
        "experiment": cfg.experiment,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "version": __version__,
        "numpy": np.__version__,
        "rows": len(result.rows),
        "failures": len(result.failures),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out / "results.csv"
