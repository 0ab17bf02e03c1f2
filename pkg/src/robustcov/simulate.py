"""Synthetic data generators for the simulation experiments.

All randomness flows through :func:`make_rng`, a counter-based Philox
generator seeded through ``numpy.random.SeedSequence``. Independent streams
for replicates are obtained with :func:`cell_rng`.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, toeplitz

from .exceptions import ConfigurationError
from .linalg import evd


def make_rng(seed=None):
    if isinstance(seed, np.random.Generator):
        return seed
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def cell_rng(master_seed, *key):
    """Generator for one (grid point, replicate) cell; same key -> same stream."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class SimConfig:
    p: int = 15
    n: int = 200
    rho: float = 0.7
    alpha: float = 1.0
    snr_sigma2: float = 10.0
    rank: Optional[int] = None
    outlier_ratio: float = 0.0
    sigma_wgn: float = 0.0
    sigma_o2: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        if not -1 < self.rho < 1:
            raise ConfigurationError("rho must lie in (-1, 1)")
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if not 0 <= self.outlier_ratio < 1:
            raise ConfigurationError("outlier_ratio must lie in [0, 1)")
        if self.rank is not None and not 1 <= self.rank < self.p:
            raise ConfigurationError("rank must satisfy 1 <= rank < p")

    def covariance(self):
        """Toeplitz scatter, or its low-rank factor-model version when ``rank`` is set."""
        r = toeplitz_scatter(self.p, self.rho)
        if self.rank is None:
            return r
        return lowrank_cov(r, self.rank, self.snr_sigma2)[0]


def toeplitz_scatter(p, rho):
    """``R[i, j] = rho ** |i - j|``."""
    if not -1 < rho < 1:
        raise ConfigurationError("rho must lie in (-1, 1)")
    return toeplitz(rho ** np.arange(p))


def lowrank_cov(scatter, r, sigma2):
    """``I + sigma2 U U^T`` with ``U`` the top-``r`` eigenvectors of ``scatter``."""
    p = scatter.shape[0]
    if not 1 <= r < p:
        raise ConfigurationError("rank must satisfy 1 <= r < p")
    u = evd(scatter).eigenvectors[:, :r]
    return np.eye(p) + sigma2 * u @ u.T, u


def _factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0, None))


def sample_gamma_textures(n, alpha, rng):
    """Textures ~ Gamma(shape=alpha, scale=1/alpha); alpha = 1 is exactly Exp(1)."""
    if alpha == 1.0:
        return rng.standard_exponential(n)
    return rng.gamma(alpha, 1.0 / alpha, size=n)


def sample_msg(cov, n, alpha=1.0, seed=None, textures=None):
    """Draw ``n`` mixture-of-scaled-Gaussian columns ``sqrt(tau_i) L z_i``.

    Pass ``textures`` explicitly (e.g. all ones) to pin them.

    Returns
    -------
    y : (p, n) array
    tau : (n,) array
        True textures.
    """
    rng = make_rng(seed)
    cov = np.asarray(cov, dtype=float)
    l = _factor(cov)
    z = rng.standard_normal((cov.shape[0], n))
    tau = sample_gamma_textures(n, alpha, rng) if textures is None else np.broadcast_to(np.asarray(textures, float), (n,)).copy()
    return (l @ z) * np.sqrt(tau), tau


def corrupt_wgn(data, ratio, sigma_wgn, seed=None):
    """Add ``N(0, sigma_wgn^2 I)`` noise to ``floor(ratio * n)`` random columns.

    Returns the corrupted copy and the sorted indices of corrupted columns.
    """
    if not 0 <= ratio < 1:
        raise ConfigurationError("ratio must lie in [0, 1)")
    rng = make_rng(seed)
    y = np.array(data, dtype=float)
    p, n = y.shape
    k = int(np.floor(ratio * n))
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    y[:, idx] += sigma_wgn * rng.standard_normal((p, k))
    return y, idx


def random_subspace(p, k, rng):
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    return q[:, :k], q[:, k:]


def sample_haystack(p, n, k, sigma_s2, sigma_o2, outlier_ratio, seed=None):
    """Haystack data: inliers ``N(0, I + s2 U U^T)``, outliers ``N(0, I + o2 Uperp Uperp^T)``.

    Returns
    -------
    y : (p, n) array
    is_outlier : (n,) bool array
    u : (p, k) signal basis
    """
    if not 1 <= k < p:
        raise ConfigurationError("k must satisfy 1 <= k < p")
    if not 0 <= outlier_ratio < 1:
        raise ConfigurationError("outlier_ratio must lie in [0, 1)")
    rng = make_rng(seed)
    u, u_perp = random_subspace(p, k, rng)
    n_out = int(round(outlier_ratio * n))
    is_outlier = np.zeros(n, dtype=bool)
    is_outlier[rng.choice(n, size=n_out, replace=False)] = True
    z = rng.standard_normal((p, n))
    sig = u @ (np.sqrt(sigma_s2) * rng.standard_normal((k, n)))
    out = u_perp @ (np.sqrt(sigma_o2) * rng.standard_normal((p - k, n)))
    y = z + np.where(is_outlier, out, sig)
    return y, is_outlier, u
