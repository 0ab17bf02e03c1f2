"""Incomplete data matrices, missingness patterns and per-sample permutations.

Data are stored column-wise: ``values[:, i]`` is sample ``i``. The boolean
``mask`` is the single source of truth for which entries are observed.
"""
import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ConfigurationError, InvalidInputError, RejectedSampleError

NA_TOKEN = "NA"


@dataclass(frozen=True)
class IncompleteMatrix:
    """p x n data with a boolean mask (True = observed).

    Entries under a False mask are undefined; they are stored as NaN so any
    accidental read shows up immediately.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2 or values.shape != mask.shape:
            raise InvalidInputError(f"values {values.shape} and mask {mask.shape} must be equal 2-D shapes")
        if not np.all(np.isfinite(values[mask])):
            raise InvalidInputError("observed entries must be finite")
        values[~mask] = np.nan
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def complete(cls, full):
        full = np.asarray(full, dtype=float)
        return cls(full, np.ones(full.shape, dtype=bool))

    @classmethod
    def from_nan(cls, arr):
        arr = np.asarray(arr, dtype=float)
        return cls(arr, ~np.isnan(arr))

    @property
    def p(self):
        return self.values.shape[0]

    @property
    def n(self):
        return self.values.shape[1]

    @property
    def missing_ratio(self):
        return 1.0 - self.mask.mean()

    def filled(self, fill=0.0):
        """Copy of the values with missing entries replaced by ``fill``."""
        out = np.array(self.values)
        out[~self.mask] = fill
        return out

    def columns(self, idx):
        idx = np.asarray(idx, dtype=int)
        return IncompleteMatrix(self.values[:, idx], self.mask[:, idx])

    def validate(self):
        """Raise :class:`RejectedSampleError` if any sample has no observed entry."""
        empty = np.flatnonzero(~self.mask.any(axis=0))
        if empty.size:
            raise RejectedSampleError(f"samples with no observed entry: {empty[:10].tolist()}")
        return self


@dataclass(frozen=True)
class PermutationPlan:
    """Observed-first ordering of one sample's coordinates."""

    obs_idx: np.ndarray
    mis_idx: np.ndarray

    @property
    def order(self):
        return np.concatenate([self.obs_idx, self.mis_idx])

    @property
    def complete(self):
        return self.mis_idx.size == 0

    def matrix(self):
        """Permutation matrix P with ``P @ y`` = observed entries then missing ones."""
        p = self.obs_idx.size + self.mis_idx.size
        return np.eye(p)[self.order]

    def apply(self, y):
        return np.asarray(y)[self.order]

    def invert(self, y_perm):
        out = np.empty_like(np.asarray(y_perm))
        out[self.order] = y_perm
        return out


def build_plans(data):
    """One :class:`PermutationPlan` per sample (stable observed / missing split)."""
    data.validate()
    plans = []
    for col in data.mask.T:
        plans.append(PermutationPlan(np.flatnonzero(col), np.flatnonzero(~col)))
    return plans


def split_sample_sets(data):
    """Indices of fully observed samples and of partially observed ones."""
    full = data.mask.all(axis=0)
    return np.flatnonzero(full), np.flatnonzero(~full)


def mask_groups(mask):
    """Group sample indices by identical missingness column.

    Returns a list of ``(column_mask, sample_indices)``, ordered by first
    occurrence.
    """
    mask = np.asarray(mask, dtype=bool)
    uniq, inverse = np.unique(mask.T, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    first = [np.flatnonzero(inverse == k)[0] for k in range(uniq.shape[0])]
    out = []
    for k in np.argsort(first):
        out.append((uniq[k].astype(bool), np.flatnonzero(inverse == k)))
    return out


# ---------------------------------------------------------------------------
# Pattern generation
# ---------------------------------------------------------------------------

PATTERN_KINDS = ("monotone", "general", "random")


@dataclass
class PatternSpec:
    """Missing-data pattern description.

    ``monotone`` removes one ``block_rows x block_cols`` rectangle from the
    last variables of the last samples. ``general`` scatters rectangular
    blocks with side lengths drawn uniformly in ``row_range`` and
    ``col_range`` until ``target_ratio`` is reached within ``ratio_tol``.
    ``random`` deletes entries independently with probability
    ``target_ratio``.
    """

    kind: str = "general"
    target_ratio: float = 0.0
    block_rows: int = 7
    block_cols: int = 20
    row_range: tuple = (2, 8)
    col_range: tuple = (2, 20)
    ratio_tol: float = 0.02
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ConfigurationError(f"unknown pattern kind {self.kind!r}")
        if not 0.0 <= self.target_ratio < 1.0:
            raise ConfigurationError("target_ratio must lie in [0, 1)")
        self.row_range = tuple(int(v) for v in self.row_range)
        self.col_range = tuple(int(v) for v in self.col_range)


def _rng(spec, rng):
    if rng is not None:
        return rng
    return np.random.default_rng(spec.seed)


def _monotone_mask(p, n, spec):
    if not (0 < spec.block_rows < p and 0 < spec.block_cols <= n):
        raise ConfigurationError(f"monotone block {spec.block_rows}x{spec.block_cols} does not fit {p}x{n}")
    mask = np.ones((p, n), dtype=bool)
    mask[p - spec.block_rows:, n - spec.block_cols:] = False
    return mask


def _random_mask(p, n, spec, rng):
    mask = rng.random((p, n)) >= spec.target_ratio
    # redraw any column that lost every entry
    for i in np.flatnonzero(~mask.any(axis=0)):
        while not mask[:, i].any():
            mask[:, i] = rng.random(p) >= spec.target_ratio
    return mask


def _general_mask(p, n, spec, rng):
    rlo, rhi = spec.row_range
    clo, chi = spec.col_range
    if not (1 <= rlo <= rhi < p and 1 <= clo <= chi):
        raise ConfigurationError(f"general block ranges {spec.row_range}, {spec.col_range} infeasible for p={p}")
    total = p * n
    target = int(round(spec.target_ratio * total))
    upper = spec.target_ratio + spec.ratio_tol / 2
    mask = np.ones((p, n), dtype=bool)
    missing = 0
    failures = 0
    while missing < target - spec.ratio_tol * total / 4:
        h = int(rng.integers(rlo, rhi + 1))
        w = int(rng.integers(clo, min(chi, n) + 1))
        # shrink the last blocks so the ratio does not overshoot
        need = target - missing
        if h * w > need:
            w = max(1, int(np.ceil(need / h)))
        r0 = int(rng.integers(0, p - h + 1))
        c0 = int(rng.integers(0, n - w + 1))
        trial = mask.copy()
        trial[r0:r0 + h, c0:c0 + w] = False
        new_missing = total - int(trial.sum())
        if new_missing == missing or new_missing > upper * total or not trial.any(axis=0).all():
            failures += 1
            if failures > 10000:
                raise ConfigurationError(f"cannot reach missing ratio {spec.target_ratio} with blocks {spec.row_range}x{spec.col_range}")
            continue
        mask = trial
        missing = new_missing
    return mask


def make_mask(p, n, spec, rng=None):
    """Boolean observation mask of shape (p, n) following ``spec``."""
    if spec.kind == "monotone":
        return _monotone_mask(p, n, spec)
    if spec.target_ratio == 0:
        return np.ones((p, n), dtype=bool)
    rng = _rng(spec, rng)
    if spec.kind == "random":
        return _random_mask(p, n, spec, rng)
    return _general_mask(p, n, spec, rng)


def apply_pattern(full, spec, rng=None):
    """Remove entries from a complete p x n matrix according to ``spec``."""
    full = np.asarray(full, dtype=float)
    if full.ndim != 2:
        raise InvalidInputError("full data must be a 2-D array")
    mask = make_mask(full.shape[0], full.shape[1], spec, rng)
    return IncompleteMatrix(full, mask)


# ---------------------------------------------------------------------------
# CSV with NA sentinel
# ---------------------------------------------------------------------------

def write_csv(data, path_or_buf):
    """Write rows = variables, columns = samples; missing cells as ``NA``."""
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.writer(fh, lineterminator="\n")
        for row, mrow in zip(data.values, data.mask):
            writer.writerow([repr(float(v)) if m else NA_TOKEN for v, m in zip(row, mrow)])
    finally:
        if own:
            fh.close()


def read_csv(path_or_buf):
    """Inverse of :func:`write_csv`."""
    if isinstance(path_or_buf, str) and "\n" in path_or_buf:
        path_or_buf = io.StringIO(path_or_buf)
    own = not hasattr(path_or_buf, "read")
    fh = open(path_or_buf, newline="") if own else path_or_buf
    try:
        rows = [r for r in csv.reader(fh) if r]
    finally:
        if own:
            fh.close()
    if not rows or len({len(r) for r in rows}) != 1:
        raise InvalidInputError("CSV must be a non-empty rectangular table")
    mask = np.array([[c.strip() != NA_TOKEN for c in r] for r in rows])
    values = np.array([[float(c) if c.strip() != NA_TOKEN else np.nan for c in r] for r in rows])
    return IncompleteMatrix(values, mask)
