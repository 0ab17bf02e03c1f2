"""EM-EOF gap filling with an optional robust covariance at the last stage.

The EOF loop alternates covariance estimation on the current completed
matrix and reconstruction of the missing entries from the ``k`` leading
eigenvectors. With ``final_estimator="em_tyl_r"`` the last reconstruction
uses the low-rank robust EM covariance computed directly from the incomplete
data, which only depends on the missingness pattern and not on the imputed
values. ``final_estimator="rmi_r"`` plugs in the low-rank robust multiple
imputation covariance the same way.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .estimators import EstimatorConfig, impute_baselines, low_rank_project, run_em, scm
from .exceptions import ConfigurationError, InvalidInputError
from .linalg import evd, spd_inv
from .missing import IncompleteMatrix, mask_groups
from .simulate import make_rng

logger = logging.getLogger(__name__)


FINAL_ESTIMATORS = ("scm", "em_tyl_r", "rmi_r")


@dataclass
class ImputeConfig:
    k: int = 5
    max_outer_iter: int = 500
    outer_tol: float = 1e-6
    cv_fraction: float = 0.01
    final_estimator: str = "scm"
    reconstruction: str = "projection"
    em_max_iter: int = 200
    q_imputations: int = 10
    seed: Optional[int] = None

    def __post_init__(self):
        if self.final_estimator not in FINAL_ESTIMATORS:
            raise ConfigurationError(f"unknown final_estimator {self.final_estimator!r}")
        if self.reconstruction not in ("projection", "regression"):
            raise ConfigurationError(f"unknown reconstruction {self.reconstruction!r}")
        if not 0 < self.cv_fraction <= 0.1:
            raise ConfigurationError("cv_fraction must lie in (0, 0.1]")
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")


@dataclass
class CvReport:
    rmse: float
    cv_cells: list = field(default_factory=list)  # (row, col, true, imputed)

    @staticmethod
    def from_cells(cells):
        if not cells:
            return CvReport(float("nan"), [])
        err = np.array([imp - true for _, _, true, imp in cells])
        return CvReport(float(np.sqrt(np.mean(err ** 2))), list(cells))

    def to_dict(self):
        return {
            "rmse": self.rmse,
            "cv_cells": [{"row": int(r), "col": int(c), "true": float(t), "imputed": float(i)} for r, c, t, i in self.cv_cells],
        }


@dataclass
class ImputeResult:
    completed: np.ndarray
    report: CvReport
    converged: bool
    iterations: int


def hold_out_cv_cells(data, fraction, seed=None):
    """Hide ``round(fraction * #observed)`` (at least one) observed cells.

    Cells are drawn uniformly among observed cells; a cell is skipped if
    removing it would leave its sample with no observed entry.

    Returns
    -------
    masked : IncompleteMatrix
    cells : list of (row, col, true_value)
    """
    rng = make_rng(seed)
    rows, cols = np.nonzero(data.mask)
    n_obs = rows.size
    count = max(1, int(round(fraction * n_obs)))
    if count > n_obs:
        raise InvalidInputError(f"cannot hold out {count} of {n_obs} observed cells")
    mask = data.mask.copy()
    per_col = mask.sum(axis=0)
    cells = []
    for j in rng.permutation(n_obs):
        if len(cells) == count:
            break
        r, c = rows[j], cols[j]
        if per_col[c] <= 1:
            continue
        mask[r, c] = False
        per_col[c] -= 1
        cells.append((int(r), int(c), float(data.values[r, c])))
    if len(cells) < count:
        raise InvalidInputError("not enough observed cells to hold out")
    cells.sort()
    return IncompleteMatrix(data.values, mask), cells


def _reconstruct(x, miss, cov, k, mode, obs_mask):
    """One update of the missing cells of the centered completed matrix ``x``."""
    if mode == "projection":
        u = evd(cov).eigenvectors[:, :k]
        rec = u @ (u.T @ x)
        out = x.copy()
        out[miss] = rec[miss]
        return out
    return _regression_fill(x, obs_mask, low_rank_project(cov, k) if k < cov.shape[0] else cov)


def _regression_fill(x, obs_mask, model):
    out = x.copy()
    for col, members in mask_groups(obs_mask):
        if col.all():
            continue
        o = np.flatnonzero(col)
        m = np.flatnonzero(~col)
        coef = model[np.ix_(m, o)] @ spd_inv(model[np.ix_(o, o)])
        out[np.ix_(m, members)] = coef @ x[np.ix_(o, members)]
    return out


def final_fill(x, obs_mask, cov, k, mode):
    """One reconstruction of the missing cells from a fixed covariance ``cov``."""
    return _reconstruct(x, ~obs_mask, cov, k, mode, obs_mask)


def _iterate(x, miss, obs_mask, k, mode, max_iter, tol, cov_fn):
    converged = not miss.any()
    it = 0
    for it in range(1, max_iter + 1):
        if converged:
            break
        new = _reconstruct(x, miss, cov_fn(x), k, mode, obs_mask)
        change = np.mean((new[miss] - x[miss]) ** 2)
        x = new
        if change < tol:
            converged = True
            break
    return x, converged, it


def eof_complete(data, config):
    """Fill the missing entries of ``data`` (no cross-validation).

    Returns ``(completed, converged, iterations)``; observed entries are
    returned unchanged.
    """
    data.validate()
    if config.k >= data.p and config.final_estimator != "scm":
        raise ConfigurationError(f"{config.final_estimator} needs k < p")
    if config.k > data.p:
        raise ConfigurationError("k must not exceed p")
    counts = data.mask.sum(axis=1)
    center = np.where(counts > 0, data.filled(0.0).sum(axis=1) / np.maximum(counts, 1), 0.0)
    miss = ~data.mask
    x = np.where(data.mask, data.filled(0.0) - center[:, None], 0.0)

    x, converged, it = _iterate(x, miss, data.mask, config.k, config.reconstruction,
                                config.max_outer_iter, config.outer_tol, scm)
    if miss.any():
        centered = IncompleteMatrix(np.where(data.mask, x, np.nan), data.mask)
        if config.final_estimator == "scm":
            cov = scm(x)
        elif config.final_estimator == "em_tyl_r":
            cov = run_em(centered, EstimatorConfig(kind="em_tyl", rank=config.k, em_max_iter=config.em_max_iter)).sigma
        else:
            cfg = EstimatorConfig(kind="rmi", rank=config.k, q_imputations=config.q_imputations)
            cov = impute_baselines(centered, cfg, rng=make_rng(config.seed)).sigma
        x = final_fill(x, data.mask, cov, config.k, config.reconstruction)
    completed = x + center[:, None]
    completed[data.mask] = data.values[data.mask]
    if not converged:
        logger.info("EM-EOF did not converge in %d iterations", config.max_outer_iter)
    return completed, converged, it


def em_eof_impute(data, config, seed=None):
    """Hold out CV cells, impute, and score the held-out cells by RMSE.

    Returns
    -------
    ImputeResult
        ``completed`` keeps every originally observed entry (held-out cells
        included) and fills the originally missing ones.
    """
    masked, cells = hold_out_cv_cells(data, config.cv_fraction, config.seed if seed is None else seed)
    completed, converged, it = eof_complete(masked, config)
    report = CvReport.from_cells([(r, c, t, float(completed[r, c])) for r, c, t in cells])
    for r, c, t in cells:
        completed[r, c] = t
    return ImputeResult(completed, report, converged, it)


def sweep_k(data, ks, config):
    """CV RMSE for each candidate ``k`` (same held-out cells for all)."""
    out = {}
    for k in ks:
        cfg = ImputeConfig(**{**config.__dict__, "k": k})
        out[k] = em_eof_impute(data, cfg).report.rmse
    return out
