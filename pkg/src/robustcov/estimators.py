"""Covariance / shape estimators for incomplete mixture-of-scaled-Gaussian data.

The EM estimators (``em_tyl``, ``em_scm`` and their low-rank variants) work
on the expected sufficient statistics of each sample. For sample ``i`` with
observed coordinates ``o`` and missing coordinates ``m``::

    mu_i   = S_mo S_oo^{-1} y_o                  (conditional mean, texture free)
    G_i    = tau_i (S_mm - S_mo S_oo^{-1} S_om) + mu_i mu_i^T
    C_i    = yhat_i yhat_i^T + tau_i * embed(S_mm|o)

where ``yhat_i`` is ``y_i`` with its missing entries replaced by ``mu_i``.
``C_i`` is the expected outer product in the original coordinate order, so
the robust M-step is the fixed point

    Sigma = (p / n) sum_i C_i / tr(C_i Sigma^{-1}),   tau_i = tr(C_i Sigma^{-1}) / p

and the Gaussian M-step is ``Sigma = (1/n) sum_i C_i``.
"""
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .exceptions import ConditioningError, ConfigurationError, ConvergenceError, NearSingularError, NumericalError
from .linalg import evd, is_spd, spd_inv, symmetrize
from .missing import mask_groups, split_sample_sets
from .simulate import make_rng

logger = logging.getLogger(__name__)

EM_KINDS = ("em_tyl", "em_scm")
IMPUTE_KINDS = ("rmi", "rsi", "mean_tyl")
KINDS = EM_KINDS + ("scm", "tyler") + IMPUTE_KINDS


class DegenerateRankWarning(RuntimeWarning):
    pass


@dataclass
class EstimatorConfig:
    """Settings shared by every estimator.

    ``fp_iters_per_em`` fixed-point iterations are run per EM step; with
    ``fp_inner_loop`` the inner loop instead runs until the squared Frobenius
    change drops below ``fp_tol`` (capped at ``fp_max_iter``).
    """

    kind: str = "em_tyl"
    rank: Optional[int] = None
    em_tol: float = 1e-6
    em_max_iter: int = 200
    fp_iters_per_em: int = 1
    fp_inner_loop: bool = False
    fp_tol: float = 1e-8
    fp_max_iter: int = 100
    normalization: str = "trace"
    q_imputations: int = 10
    project_after_average: bool = True
    tyler_tol: float = 1e-8
    tyler_max_iter: int = 1000
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown estimator kind {self.kind!r}")
        if self.normalization not in ("trace", "determinant"):
            raise ConfigurationError(f"unknown normalization {self.normalization!r}")
        if self.em_tol <= 0 or self.fp_tol <= 0 or self.tyler_tol <= 0:
            raise ConfigurationError("tolerances must be positive")
        if self.fp_iters_per_em < 1 or self.em_max_iter < 1 or self.q_imputations < 1:
            raise ConfigurationError("iteration counts must be >= 1")

    def check_rank(self, p):
        if self.rank is not None and not 1 <= self.rank <= p - 1:
            raise ConfigurationError(f"rank must be in [1, {p - 1}], got {self.rank}")


@dataclass
class ShapeEstimate:
    """Estimated shape matrix with per-sample textures and convergence trace."""

    sigma: np.ndarray
    textures: np.ndarray
    iterations: int = 0
    trace: list = field(default_factory=list)
    converged: bool = True
    name: str = ""


@dataclass
class ConditionalMoments:
    """E-step statistics of one sample.

    ``B`` is in the permuted (observed-first) order, ``C`` in the original one.
    """

    mu_m_given_o: np.ndarray
    B: np.ndarray
    C: np.ndarray


def normalize_shape(sigma, how="trace"):
    """Scale ``sigma`` to trace ``p`` or to unit determinant; also return the factor applied."""
    p = sigma.shape[0]
    if how == "trace":
        c = p / np.trace(sigma)
    elif how == "determinant":
        sign, logdet = np.linalg.slogdet(sigma)
        if sign <= 0:
            raise NearSingularError("cannot determinant-normalize a non-SPD matrix")
        c = np.exp(-logdet / p)
    else:
        raise ConfigurationError(f"unknown normalization {how!r}")
    return sigma * c, c


def low_rank_project(sigma, r):
    """Closest matrix of the form ``s2 I + H`` with ``H`` PSD of rank ``r``.

    ``s2`` is the mean of the ``p - r`` smallest eigenvalues and the leading
    ``r`` eigenvalues of the result equal those of ``sigma``.
    """
    sigma = np.asarray(sigma, dtype=float)
    p = sigma.shape[0]
    if not 1 <= r < p:
        raise ConfigurationError(f"rank must satisfy 1 <= r < p, got r={r}, p={p}")
    vals, vecs = evd(sigma)
    s2 = vals[r:].mean()
    lam = vals[:r] - s2
    if np.any(lam <= 0):
        warnings.warn("signal eigenvalue not above the noise floor; clamping", DegenerateRankWarning, stacklevel=2)
        lam = np.maximum(lam, 0.0)
    u = vecs[:, :r]
    return symmetrize(s2 * np.eye(p) + (u * lam) @ u.T)


# ---------------------------------------------------------------------------
# Complete-data estimators
# ---------------------------------------------------------------------------

def scm(y):
    """Sample covariance ``(1/n) Y Y^T`` of zero-mean column samples."""
    y = np.asarray(y, dtype=float)
    return y @ y.T / y.shape[1]


def tyler(y, tol=1e-8, max_iter=1000, init=None, normalization="trace"):
    """Tyler's fixed-point shape estimator on complete column samples.

    Iterates ``S <- (p/n) sum_i y_i y_i^T / (y_i^T S^{-1} y_i)`` with
    normalization after every step, until the relative Frobenius change is
    below ``tol``. Zero columns carry no direction and are ignored.

    Raises
    ------
    ConvergenceError
        If ``tol`` is not reached within ``max_iter`` iterations.
    """
    y = np.asarray(y, dtype=float)
    y = y[:, np.any(y != 0, axis=0)]
    p, n = y.shape
    if n <= p:
        raise NearSingularError(f"Tyler's estimator needs n > p (n={n}, p={p})")
    sigma = np.eye(p) if init is None else np.array(init, dtype=float)
    sigma, _ = normalize_shape(sigma, normalization)
    delta = np.inf
    for it in range(1, max_iter + 1):
        try:
            q = np.sum(y * cho_solve(cho_factor(sigma, lower=True), y), axis=0)
        except LinAlgError as exc:
            raise NearSingularError(f"Tyler iterate lost positive definiteness at iteration {it}") from exc
        new = symmetrize((p / n) * (y / q) @ y.T)
        if not np.all(np.isfinite(new)):
            raise NumericalError(it)
        new, _ = normalize_shape(new, normalization)
        delta = np.linalg.norm(new - sigma) / np.linalg.norm(sigma)
        sigma = new
        if delta < tol:
            return sigma
    raise ConvergenceError(delta)


def tyler_textures(y, sigma):
    """Per-sample texture estimates ``y_i^T S^{-1} y_i / p``."""
    y = np.asarray(y, dtype=float)
    return np.sum(y * np.linalg.solve(sigma, y), axis=0) / y.shape[0]


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

@dataclass
class _Group:
    members: np.ndarray
    obs: np.ndarray
    mis: np.ndarray
    cond_cov: np.ndarray  # texture-free Schur complement S_mm - S_mo S_oo^{-1} S_om


class EStep:
    """Expected sufficient statistics for every sample at the current parameters.

    Stored compactly: ``filled`` holds each sample with missing entries
    replaced by their conditional mean; partially observed samples sharing a
    mask share one conditional covariance. Full per-sample matrices are
    available through :meth:`moments`.
    """

    def __init__(self, filled, textures, groups):
        self.filled = filled
        self.textures = textures
        self.groups = groups
        self.p, self.n = filled.shape
        self._group_of = {}
        for g in groups:
            for i in g.members:
                self._group_of[int(i)] = g

    def quad_forms(self, sigma_inv):
        """``tr(C_i sigma^{-1})`` for every sample."""
        out = np.sum(self.filled * (sigma_inv @ self.filled), axis=0)
        for g in self.groups:
            out[g.members] += self.textures[g.members] * np.sum(sigma_inv[np.ix_(g.mis, g.mis)] * g.cond_cov)
        return out

    def weighted_sum(self, weights):
        """``sum_i weights_i C_i``."""
        out = (self.filled * weights) @ self.filled.T
        for g in self.groups:
            out[np.ix_(g.mis, g.mis)] += np.sum(weights[g.members] * self.textures[g.members]) * g.cond_cov
        return symmetrize(out)

    def moments(self, i):
        """Full :class:`ConditionalMoments` of sample ``i``."""
        y = self.filled[:, i]
        g = self._group_of.get(int(i))
        if g is None:
            b = np.outer(y, y)
            return ConditionalMoments(np.zeros(0), b, b.copy())
        c = np.outer(y, y)
        c[np.ix_(g.mis, g.mis)] += self.textures[i] * g.cond_cov
        order = np.concatenate([g.obs, g.mis])
        return ConditionalMoments(y[g.mis].copy(), c[np.ix_(order, order)], c)


def e_step(data, sigma, textures, plans=None):
    """Conditional moments of the missing entries given the observed ones.

    Parameters
    ----------
    data : IncompleteMatrix
    sigma : (p, p) SPD array
    textures : (n,) positive array
    plans : list of PermutationPlan, optional
        Accepted for interface symmetry; samples are regrouped by mask.

    Raises
    ------
    ConditioningError
        If the observed block of ``sigma`` is numerically singular for a sample.
    """
    data.validate()
    if plans is not None and len(plans) != data.n:
        raise ConfigurationError("one plan per sample is required")
    textures = np.asarray(textures, dtype=float)
    filled = data.filled(0.0)
    groups = []
    for col, members in mask_groups(data.mask):
        if col.all():
            continue
        obs = np.flatnonzero(col)
        mis = np.flatnonzero(~col)
        s_oo = sigma[np.ix_(obs, obs)]
        s_mo = sigma[np.ix_(mis, obs)]
        try:
            factor = cho_factor(s_oo, lower=True)
        except LinAlgError as exc:
            raise ConditioningError(int(members[0])) from exc
        if np.linalg.cond(s_oo) > 1e14:
            raise ConditioningError(int(members[0]))
        coef = cho_solve(factor, s_mo.T).T  # S_mo S_oo^{-1}
        filled[np.ix_(mis, members)] = coef @ filled[np.ix_(obs, members)]
        cond = symmetrize(sigma[np.ix_(mis, mis)] - coef @ s_mo.T)
        groups.append(_Group(members, obs, mis, cond))
    return EStep(filled, textures, groups)


def observed_loglik(data, sigma, textures=None):
    """Observed-data log-likelihood, up to additive constants.

    ``sum_i -log|tau_i S_oo,i| - y_o,i^T (tau_i S_oo,i)^{-1} y_o,i``, i.e. the
    missing coordinates are marginalized out.
    """
    n = data.n
    tau = np.ones(n) if textures is None else np.asarray(textures, dtype=float)
    total = 0.0
    for col, members in mask_groups(data.mask):
        obs = np.flatnonzero(col)
        s_oo = sigma[np.ix_(obs, obs)]
        factor = cho_factor(s_oo, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        yo = data.values[np.ix_(obs, members)]
        quad = np.sum(yo * cho_solve(factor, yo), axis=0)
        t = tau[members]
        total += np.sum(-logdet - obs.size * np.log(t) - quad / t)
    return float(total)


# ---------------------------------------------------------------------------
# M-steps
# ---------------------------------------------------------------------------

def fixed_point_step(estep, sigma):
    """One application of ``H(S) = (p/n) sum_i C_i / tr(C_i S^{-1})``."""
    q = estep.quad_forms(spd_inv(sigma))
    return (estep.p / estep.n) * estep.weighted_sum(1.0 / q)


def m_step_tyl(estep, sigma_prev, config):
    """Robust M-step: fixed-point update of the shape, then closed-form textures.

    Returns ``(sigma, textures)``; ``sigma`` is normalized per ``config``
    and, when ``config.rank`` is set, projected to the low-rank model after
    every fixed-point iteration.
    """
    sigma = sigma_prev
    n_iter = config.fp_max_iter if config.fp_inner_loop else config.fp_iters_per_em
    for m in range(1, n_iter + 1):
        new = fixed_point_step(estep, sigma)
        if not np.all(np.isfinite(new)):
            raise NumericalError(m)
        if config.rank is not None:
            new = low_rank_project(new, config.rank)
        new, _ = normalize_shape(new, config.normalization)
        delta = np.sum((new - sigma) ** 2)
        sigma = new
        if config.fp_inner_loop and delta < config.fp_tol:
            break
    textures = estep.quad_forms(spd_inv(sigma)) / estep.p
    return sigma, textures


def m_step_gauss(estep, rank=None):
    """Gaussian M-step ``(1/n) sum_i C_i``, optionally projected to rank ``r``."""
    sigma = estep.weighted_sum(np.full(estep.n, 1.0 / estep.n))
    if not np.all(np.isfinite(sigma)):
        raise NumericalError(0)
    if rank is not None:
        sigma = low_rank_project(sigma, rank)
    return sigma


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------

def initial_sigma(data, config=None):
    """Starting shape: Tyler on fully observed samples, else their SCM, else identity.

    Returns ``(sigma, source)`` with ``source`` in {"tyl_obs", "scm_obs", "identity"}.
    """
    config = config or EstimatorConfig()
    p = data.p
    full, _ = split_sample_sets(data)
    y = data.values[:, full]
    if full.size > p:
        try:
            sigma = tyler(y, config.tyler_tol, config.tyler_max_iter, normalization=config.normalization)
            if is_spd(sigma):
                return sigma, "tyl_obs"
        except (ConvergenceError, NearSingularError, NumericalError):
            pass
        s = scm(y)
        if is_spd(s):
            return normalize_shape(s, config.normalization)[0], "scm_obs"
    return np.eye(p), "identity"


def run_em(data, config=None, init=None):
    """EM estimation of the shape matrix (and textures) from incomplete data.

    ``config.kind`` selects the robust (``em_tyl``) or Gaussian (``em_scm``)
    M-step; ``config.rank`` activates the low-rank model. The loop stops
    when ``||theta_new - theta_old||_F^2`` drops below ``config.em_tol``,
    with theta = (shape, textures).

    Returns
    -------
    ShapeEstimate
        ``converged`` is False when ``em_max_iter`` was reached.
    """
    config = config or EstimatorConfig()
    if config.kind not in EM_KINDS:
        raise ConfigurationError(f"run_em handles {EM_KINDS}, got {config.kind!r}")
    data.validate()
    config.check_rank(data.p)
    gaussian = config.kind == "em_scm"

    if init is None:
        sigma, source = initial_sigma(data, config)
        logger.debug("EM initialized from %s", source)
    else:
        sigma = np.array(init, dtype=float)
    tau = np.ones(data.n)
    trace = []
    converged = False
    it = 0
    for it in range(1, config.em_max_iter + 1):
        estep = e_step(data, sigma, tau)
        if gaussian:
            new_sigma = m_step_gauss(estep, config.rank)
            new_tau = tau
        else:
            new_sigma, new_tau = m_step_tyl(estep, sigma, config)
        delta = float(np.sum((new_sigma - sigma) ** 2) + np.sum((new_tau - tau) ** 2))
        trace.append(delta)
        sigma, tau = new_sigma, new_tau
        if not np.isfinite(delta):
            raise NumericalError(it)
        if delta < config.em_tol:
            converged = True
            break
    name = config.kind + ("_r" if config.rank is not None else "")
    return ShapeEstimate(sigma, tau, it, trace, converged, name)


# ---------------------------------------------------------------------------
# Imputation baselines
# ---------------------------------------------------------------------------

def _observed_stats(data):
    """Per-sample mean and standard deviation of the observed entries.

    Samples with fewer than two observed entries take the standard deviation
    of all observed entries instead.
    """
    counts = data.mask.sum(axis=0)
    filled = data.filled(0.0)
    mean = filled.sum(axis=0) / counts
    sq = np.where(data.mask, (filled - mean) ** 2, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        std = np.sqrt(sq / (counts - 1))
    few = counts < 2
    if np.any(few):
        warnings.warn(f"{int(few.sum())} samples have < 2 observed entries; using global spread", RuntimeWarning, stacklevel=3)
        std[few] = np.std(data.values[data.mask], ddof=1) if data.mask.sum() > 1 else 1.0
    return mean, std


def stochastic_impute(data, rng, alpha=1.0):
    """One stochastic imputation: missing entries of sample ``i`` drawn from
    ``N(mean_i, (sqrt(tau) * std_i)^2)`` with one ``tau ~ Gamma(alpha, 1/alpha)`` per sample."""
    mean, std = _observed_stats(data)
    tau = rng.gamma(alpha, 1.0 / alpha, size=data.n)
    draws = mean + np.sqrt(tau) * std * rng.standard_normal(data.values.shape)
    out = data.filled(0.0)
    out[~data.mask] = draws[~data.mask]
    return out


def mean_impute(data):
    mean, _ = _observed_stats(data)
    out = data.filled(0.0)
    out[~data.mask] = np.broadcast_to(mean, out.shape)[~data.mask]
    return out


def impute_baselines(data, config, rng=None):
    """Imputation-then-Tyler baselines ``rmi``, ``rsi`` and ``mean_tyl``.

    RMI averages (arithmetically) the normalized Tyler estimates of
    ``q_imputations`` stochastic completions; RSI is RMI with one
    completion. With ``config.rank`` the low-rank projection is applied to
    the average (or to each estimate when ``project_after_average`` is False).
    """
    if config.kind not in IMPUTE_KINDS:
        raise ConfigurationError(f"impute_baselines handles {IMPUTE_KINDS}, got {config.kind!r}")
    data.validate()
    config.check_rank(data.p)
    rng = make_rng(rng if rng is not None else config.seed)

    def fit(y):
        s = tyler(y, config.tyler_tol, config.tyler_max_iter, normalization=config.normalization)
        if config.rank is not None and not config.project_after_average:
            s = normalize_shape(low_rank_project(s, config.rank), config.normalization)[0]
        return s

    if config.kind == "mean_tyl":
        completions = [mean_impute(data)]
    else:
        q = 1 if config.kind == "rsi" else config.q_imputations
        completions = [stochastic_impute(data, rng) for _ in range(q)]
    sigma = sum(fit(y) for y in completions) / len(completions)
    if config.rank is not None and config.project_after_average:
        sigma = low_rank_project(sigma, config.rank)
    sigma, _ = normalize_shape(sigma, config.normalization)
    textures = np.mean([tyler_textures(y, sigma) for y in completions], axis=0)
    name = config.kind + ("_r" if config.rank is not None else "")
    return ShapeEstimate(sigma, textures, len(completions), [], True, name)


# ---------------------------------------------------------------------------
# Named estimators used by the benchmarks
# ---------------------------------------------------------------------------

def _finish(sigma, rank, normalize, how):
    if rank is not None:
        sigma = low_rank_project(sigma, rank)
    if normalize:
        sigma = normalize_shape(sigma, how)[0]
    return sigma


def estimate(name, data, clairvoyant=None, rank=None, config=None, rng=None):
    """Run a named estimator from the benchmark table.

    Names: ``em_tyl``, ``em_scm``, ``tyl_clair``, ``scm_clair``, ``tyl_obs``,
    ``scm_obs``, ``rmi``, ``rsi``, ``mean_tyl``; a ``_r`` suffix requests the
    low-rank version with ``rank``. ``clairvoyant`` is the complete p x n
    matrix needed by the ``*_clair`` estimators.

    Returns
    -------
    ShapeEstimate
    """
    base = config or EstimatorConfig()
    low_rank = name.endswith("_r")
    stem = name[:-2] if low_rank else name
    r = rank if low_rank else None
    if low_rank and r is None:
        raise ConfigurationError(f"{name} needs a rank")
    how = base.normalization

    if stem in EM_KINDS:
        return run_em(data, replace(base, kind=stem, rank=r))
    if stem in IMPUTE_KINDS:
        return impute_baselines(data, replace(base, kind=stem, rank=r), rng=rng)
    if stem in ("tyl_clair", "scm_clair"):
        if clairvoyant is None:
            raise ConfigurationError(f"{name} needs the clairvoyant data")
        y = np.asarray(clairvoyant, dtype=float)
    elif stem in ("tyl_obs", "scm_obs"):
        full, _ = split_sample_sets(data)
        y = data.values[:, full]
    else:
        raise ConfigurationError(f"unknown estimator {name!r}")
    if stem.startswith("tyl"):
        sigma = _finish(tyler(y, base.tyler_tol, base.tyler_max_iter, normalization=how), r, True, how)
        return ShapeEstimate(sigma, tyler_textures(y, sigma), name=name)
    sigma = scm(y)
    if not is_spd(sigma):
        raise NearSingularError(f"{name}: sample covariance of {y.shape[1]} samples is singular")
    sigma = _finish(sigma, r, False, how)
    return ShapeEstimate(sigma, np.ones(y.shape[1]), name=name)


ESTIMATOR_NAMES = (
    "em_tyl", "em_scm", "tyl_clair", "scm_clair", "tyl_obs", "scm_obs", "rmi", "rsi", "mean_tyl",
    "em_tyl_r", "em_scm_r", "tyl_clair_r", "scm_clair_r", "rmi_r", "rsi_r", "mean_tyl_r",
)
