"""Covariance descriptors on the SPD manifold: MDRM classification and K-means++.

Descriptors are compared with the affine-invariant distance and averaged with
the Karcher mean from :mod:`robustcov.linalg`.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .estimators import estimate
from .exceptions import ConfigurationError, InvalidInputError, RobustCovError
from .linalg import check_spd, geodesic_distance_sq, karcher_mean
from .missing import IncompleteMatrix
from .simulate import make_rng, sample_msg, toeplitz_scatter

DESCRIPTOR_ESTIMATORS = ("scm", "em_scm", "em_tyl", "rsi", "em_scm_r", "em_tyl_r", "rsi_r")


@dataclass
class SpdDescriptor:
    matrix: np.ndarray
    label: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = check_spd(self.matrix, "descriptor")


@dataclass
class MdrmModel:
    class_means: dict

    @property
    def classes(self):
        return sorted(self.class_means)


class DescriptorError(RobustCovError):
    def __init__(self, window, cause):
        self.window = window
        super().__init__(f"descriptor estimation failed for window {window}: {cause}")


def geometric_mean_texture(textures):
    t = np.asarray(textures, dtype=float)
    return float(np.exp(np.mean(np.log(t))))


def descriptor_from_window(window, estimator="em_tyl", rank=None, rescale=False, config=None,
                           label=None, window_id=None, seed=None):
    """Estimate one SPD descriptor from a p x n_w window.

    Parameters
    ----------
    window : IncompleteMatrix or array
        NaN entries of a plain array are treated as missing.
    estimator : str
        One of :data:`DESCRIPTOR_ESTIMATORS`.
    rescale : bool
        Multiply the shape by the geometric mean of the estimated textures.
    """
    if estimator not in DESCRIPTOR_ESTIMATORS:
        raise ConfigurationError(f"unknown descriptor estimator {estimator!r}")
    data = window if isinstance(window, IncompleteMatrix) else IncompleteMatrix.from_nan(window)
    if data.n < 2:
        raise InvalidInputError("a window needs at least two samples")
    if estimator == "scm" and not data.mask.all():
        raise InvalidInputError("scm descriptors need complete windows")
    try:
        if estimator == "scm":
            est = estimate("scm_clair", data, clairvoyant=data.values, config=config)
        else:
            est = estimate(estimator, data, rank=rank, config=config, rng=make_rng(seed))
    except RobustCovError as exc:
        raise DescriptorError(window_id, exc) from exc
    sigma = est.sigma
    if rescale:
        sigma = sigma * geometric_mean_texture(est.textures)
    return SpdDescriptor(sigma, label, {"window": window_id, "estimator": estimator})


def mdrm_train(descriptors, tol=1e-10, max_iter=100):
    """Karcher mean of each class."""
    by_class = {}
    for d in descriptors:
        if d.label is None:
            raise InvalidInputError("training descriptors need labels")
        by_class.setdefault(d.label, []).append(d.matrix)
    if not by_class:
        raise InvalidInputError("no training descriptors")
    return MdrmModel({c: karcher_mean(m, tol=tol, max_iter=max_iter) for c, m in by_class.items()})


def mdrm_distances(model, descriptor):
    m = descriptor.matrix if isinstance(descriptor, SpdDescriptor) else descriptor
    return {c: geodesic_distance_sq(model.class_means[c], m) for c in model.classes}


def mdrm_predict(model, descriptor):
    """Class with the nearest mean; ties go to the smallest class id."""
    best, best_d = None, np.inf
    for c, d in mdrm_distances(model, descriptor).items():
        if d < best_d:
            best, best_d = c, d
    return best


def overall_accuracy(true, pred):
    true = np.asarray(true)
    pred = np.asarray(pred)
    if true.shape != pred.shape or true.size == 0:
        raise InvalidInputError("label arrays must be non-empty and equally long")
    return float(np.mean(true == pred))


def clustering_accuracy(true, assignments):
    """Overall accuracy after the best one-to-one matching of clusters to labels."""
    true = np.asarray(true)
    assignments = np.asarray(assignments)
    labels = np.unique(true)
    clusters = np.unique(assignments)
    counts = np.array([[np.sum((assignments == k) & (true == c)) for c in labels] for k in clusters])
    rows, cols = linear_sum_assignment(-counts)
    return float(counts[rows, cols].sum() / true.size)


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: list
    objective: list
    converged: bool


def _dist_matrix(points, centroids):
    return np.array([[geodesic_distance_sq(c, x) for c in centroids] for x in points])


def kmeanspp_spd(descriptors, k, seed=None, max_iter=50, karcher_tol=1e-8):
    """K-means++ on the SPD manifold.

    Seeds are drawn with probability proportional to the squared distance to
    the nearest chosen seed; Lloyd iterations then alternate nearest-centroid
    assignment and Karcher-mean centroid updates. An emptied cluster is
    re-seeded at the point farthest from its centroid.

    Returns
    -------
    KMeansResult
        ``objective`` holds the sum of squared distances after every update.
    """
    pts = [d.matrix if isinstance(d, SpdDescriptor) else check_spd(d) for d in descriptors]
    n = len(pts)
    if not 1 <= k <= n:
        raise ConfigurationError(f"need 1 <= K <= {n}, got {k}")
    rng = make_rng(seed)

    chosen = [int(rng.integers(n))]
    nearest = np.array([geodesic_distance_sq(pts[chosen[0]], x) for x in pts])
    while len(chosen) < k:
        total = nearest.sum()
        if total <= 0:
            rest = [i for i in range(n) if i not in chosen]
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=nearest / total))
        chosen.append(nxt)
        nearest = np.minimum(nearest, [geodesic_distance_sq(pts[nxt], x) for x in pts])
    centroids = [pts[i].copy() for i in chosen]

    dist = _dist_matrix(pts, centroids)
    assign = np.argmin(dist, axis=1)
    objective = [float(dist[np.arange(n), assign].sum())]
    converged = False
    for _ in range(max_iter):
        for c in range(k):
            members = np.flatnonzero(assign == c)
            if members.size == 0:
                far = int(np.argmax(dist[np.arange(n), assign]))
                centroids[c] = pts[far].copy()
                assign[far] = c
            else:
                init = centroids[c] if members.size > 1 else None
                centroids[c] = karcher_mean([pts[i] for i in members], tol=karcher_tol, init=init)
        dist = _dist_matrix(pts, centroids)
        new_assign = np.argmin(dist, axis=1)
        # keep current assignment on ties so the objective cannot increase
        keep = dist[np.arange(n), assign] <= dist[np.arange(n), new_assign]
        new_assign[keep] = assign[keep]
        objective.append(float(dist[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            converged = True
            break
        assign = new_assign
    return KMeansResult(assign, centroids, objective, converged)


# ---------------------------------------------------------------------------
# Synthetic labelled data
# ---------------------------------------------------------------------------

@dataclass
class ClassSpec:
    rho: float
    alpha: float = 1.0


def default_classes(n_classes):
    rhos = np.linspace(-0.6, 0.8, n_classes) if n_classes > 1 else np.array([0.5])
    return [ClassSpec(float(r)) for r in rhos]


def sample_class_window(spec, p, n_w, rng):
    """One p x n_w window of MSG samples from a class's Toeplitz shape."""
    y, _ = sample_msg(toeplitz_scatter(p, spec.rho), n_w, spec.alpha, rng)
    return y


def mask_bands(window, bands, fraction=1.0, rng=None):
    """Set the given variables missing in ``fraction`` of the window's samples.

    At least one band is always kept so no sample becomes empty.
    """
    y = np.asarray(window, dtype=float)
    p, n = y.shape
    bands = np.asarray(sorted(set(int(b) for b in bands)), dtype=int)
    if bands.size >= p:
        raise ConfigurationError("cannot mask every band")
    mask = np.ones((p, n), dtype=bool)
    if bands.size:
        if fraction >= 1.0:
            cols = np.arange(n)
        else:
            rng = make_rng(rng)
            cols = np.sort(rng.choice(n, size=int(round(fraction * n)), replace=False))
        mask[np.ix_(bands, cols)] = False
    return IncompleteMatrix(y, mask)


def successive_bands(p, count, start=0):
    return [(start + j) % p for j in range(count)]


def stripe_image(classes, p, w, grid, rng):
    """Synthetic image tiled with w x w windows, one class per window.

    Returns the pixel data (p, H, W) and the window labels (grid_rows, grid_cols).
    """
    gr, gc = grid
    labels = rng.integers(len(classes), size=(gr, gc))
    img = np.empty((p, gr * w, gc * w))
    for a in range(gr):
        for b in range(gc):
            win = sample_class_window(classes[labels[a, b]], p, w * w, rng)
            img[:, a * w:(a + 1) * w, b * w:(b + 1) * w] = win.reshape(p, w, w)
    return img, labels


def stripe_mask(shape, bands, n_columns, rng):
    """Mask ``n_columns`` random pixel columns in each of the given bands."""
    p, h, wid = shape
    mask = np.ones(shape, dtype=bool)
    for b in bands:
        cols = rng.choice(wid, size=min(n_columns, wid), replace=False)
        mask[b][:, cols] = False
    return mask


def image_windows(img, mask, w):
    """Split a (p, H, W) image and mask into a list of IncompleteMatrix windows (row-major)."""
    p, h, wid = img.shape
    out = []
    for a in range(h // w):
        for b in range(wid // w):
            sl = (slice(None), slice(a * w, (a + 1) * w), slice(b * w, (b + 1) * w))
            v = img[sl].reshape(p, w * w)
            m = mask[sl].reshape(p, w * w)
            keep = m.any(axis=0)
            out.append(IncompleteMatrix(v[:, keep], m[:, keep]))
    return out
