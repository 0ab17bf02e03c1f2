"""Dense symmetric linear algebra and affine-invariant SPD geometry.

Matrices are plain ``numpy`` arrays. Functions validate their inputs and
never modify them.
"""
import warnings
from typing import NamedTuple

import numpy as np

from .exceptions import InvalidInputError, NearSingularError

#: minimum eigenvalue ratio for a matrix to count as SPD
SPD_RTOL = 1e-12
#: minimum eigenvalue ratio accepted by square roots and logarithms
SINGULAR_RTOL = 1e-14


class EigenDecomposition(NamedTuple):
    """Eigenvalues in descending order and matching orthonormal eigenvectors (columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


class ConvergenceWarning(UserWarning):
    pass


def as_symmetric(m, name="matrix"):
    """Return ``m`` as a float array after checking it is square, finite and symmetric."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    scale = max(np.max(np.abs(a)), 1.0) if a.size else 1.0
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * scale):
        raise InvalidInputError(f"{name} is not symmetric")
    return a


def symmetrize(a):
    return 0.5 * (a + a.T)


def evd(m):
    """Eigendecomposition of a symmetric matrix.

    Eigenvalues are returned in descending order. Each eigenvector is signed
    so that its largest-magnitude component is positive, which makes results
    reproducible across runs.

    Parameters
    ----------
    m : array-like of shape (p, p)
        Symmetric matrix.

    Returns
    -------
    EigenDecomposition
    """
    a = as_symmetric(m)
    vals, vecs = np.linalg.eigh(symmetrize(a))
    vals = vals[::-1].copy()
    vecs = vecs[:, ::-1].copy()
    if vecs.size:
        lead = np.argmax(np.abs(vecs), axis=0)
        signs = np.sign(vecs[lead, np.arange(vecs.shape[1])])
        signs[signs == 0] = 1.0
        vecs *= signs
    return EigenDecomposition(vals, vecs)


def is_spd(m, rtol=SPD_RTOL):
    try:
        vals = np.linalg.eigvalsh(symmetrize(as_symmetric(m)))
    except InvalidInputError:
        return False
    return vals.size > 0 and vals[-1] > 0 and vals[0] > rtol * vals[-1]


def check_spd(m, name="matrix", rtol=SPD_RTOL):
    """Validate that ``m`` is SPD and return it as a float array."""
    a = as_symmetric(m, name)
    vals = np.linalg.eigvalsh(symmetrize(a))
    if vals.size == 0 or vals[-1] <= 0 or vals[0] <= rtol * vals[-1]:
        raise NearSingularError(f"{name} is not positive definite (eigenvalue range {vals[0]:.3e}, {vals[-1]:.3e})")
    return a


def _spd_eigh(m):
    a = as_symmetric(m)
    vals, vecs = np.linalg.eigh(symmetrize(a))
    if vals.size == 0 or vals[-1] <= 0 or vals[0] < SINGULAR_RTOL * vals[-1]:
        raise NearSingularError("matrix is near-singular or not positive definite")
    return vals, vecs


def _from_eig(vals, vecs):
    return symmetrize((vecs * vals) @ vecs.T)


def spd_sqrt_inv_sqrt(m):
    """Return ``(m^{1/2}, m^{-1/2})`` for an SPD matrix."""
    vals, vecs = _spd_eigh(m)
    root = np.sqrt(vals)
    return _from_eig(root, vecs), _from_eig(1.0 / root, vecs)


def spd_inv(m):
    vals, vecs = _spd_eigh(m)
    return _from_eig(1.0 / vals, vecs)


def matrix_log(m):
    """Principal logarithm of an SPD matrix."""
    vals, vecs = _spd_eigh(m)
    return _from_eig(np.log(vals), vecs)


def matrix_exp(m):
    """Exponential of a symmetric matrix."""
    a = as_symmetric(m)
    vals, vecs = np.linalg.eigh(symmetrize(a))
    return _from_eig(np.exp(vals), vecs)


def geodesic_distance_sq(a, b):
    """Squared affine-invariant distance ``||log(a^{-1/2} b a^{-1/2})||_F^2``.

    Computed from the generalized eigenvalues of the pencil ``(b, a)``, which
    are the eigenvalues of ``a^{-1/2} b a^{-1/2}``.
    """
    a = as_symmetric(a, "a")
    b = as_symmetric(b, "b")
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    _, isqrt = spd_sqrt_inv_sqrt(a)
    _spd_eigh(b)
    vals = np.linalg.eigvalsh(symmetrize(isqrt @ b @ isqrt))
    if np.any(vals <= 0):
        raise NearSingularError("whitened matrix is not positive definite")
    return float(np.sum(np.log(vals) ** 2))


def geodesic_distance(a, b):
    return np.sqrt(geodesic_distance_sq(a, b))


def karcher_mean(points, tol=1e-10, max_iter=100, weights=None, init=None, return_info=False):
    """Riemannian (Karcher) mean of SPD matrices under the affine-invariant metric.

    Fixed-point iteration ``M <- M^{1/2} exp(mean_k log(M^{-1/2} P_k M^{-1/2})) M^{1/2}``
    started from the log-Euclidean mean. Stops when the Frobenius norm of the
    mean tangent vector falls below ``tol``. On non-convergence the last
    iterate is returned and a :class:`ConvergenceWarning` is emitted.

    Parameters
    ----------
    points : sequence of (p, p) arrays
    tol : float
    max_iter : int
    weights : array-like, optional
        Non-negative weights, normalized internally.
    init : (p, p) array, optional
    return_info : bool
        If True, also return ``(converged, n_iter)``.
    """
    pts = [check_spd(pt, "point") for pt in points]
    if not pts:
        raise InvalidInputError("karcher_mean needs at least one point")
    shape = pts[0].shape
    if any(pt.shape != shape for pt in pts):
        raise InvalidInputError("points must share one dimension")
    k = len(pts)
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (k,) or np.any(w < 0) or w.sum() <= 0:
        raise InvalidInputError("weights must be non-negative with positive sum")
    w = w / w.sum()

    if k == 1:
        out = pts[0].copy()
        return (out, True, 0) if return_info else out

    if init is None:
        mean = matrix_exp(sum(wi * matrix_log(pt) for wi, pt in zip(w, pts)))
    else:
        mean = check_spd(init, "init")

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        root, iroot = spd_sqrt_inv_sqrt(mean)
        tangent = sum(wi * matrix_log(iroot @ pt @ iroot) for wi, pt in zip(w, pts))
        grad = np.linalg.norm(tangent, "fro")
        mean = symmetrize(root @ matrix_exp(tangent) @ root)
        if grad < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"karcher_mean did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2)
    return (mean, converged, it) if return_info else mean
