"""Global and local K-function estimators, homogeneous and
intensity-weighted, for spatial and spatio-temporal patterns.

Normalization
-------------
All estimators are uncorrected cylindrical pair counts (no edge
correction) rescaled so that, under true-intensity weighting of a Poisson
pattern, the Monte Carlo mean tracks the Poisson reference pi r^2 (or
pi r^2 h) over the quarter-diagonal lag convention.  Two ingredients fix
the scale:

* a pair-convention constant per estimator, from Campbell's theorem with
  the sums taken literally (unordered pairs globally, all other points
  locally; the two-sided time lag |t_i - t_j| <= h absorbs the usual
  factor 2 in the spatio-temporal case);
* a single empirical calibration factor per domain
  (``EDGE_CALIBRATION_SPATIAL``, ``EDGE_CALIBRATION_ST``) absorbing the
  mean edge deficit of the uncorrected counts over that lag convention,
  fixed once by a Monte Carlo calibration run (tests/test_kstat.py keeps
  the oracle) and frozen here.

The pair enumeration is kept behind ``PairIndex`` so a spatial index can
replace the O(n^2) loop without touching the estimators.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import pdist

from .model import IntensityModel, KEstimate, LagGrid, PointPattern

__all__ = [
    "PairIndex",
    "LocalPairIndex",
    "k_homog",
    "k_inhom",
    "k_local_homog",
    "k_local_inhom",
    "theoretical_k",
    "poisson_reference",
    "resolve_weights",
    "EDGE_CALIBRATION_SPATIAL",
    "EDGE_CALIBRATION_ST",
]

# Frozen Poisson-calibration factors for the quarter-diagonal lag
# convention on rectangular windows (Monte Carlo run of 2026-08; see
# tests/test_kstat.py::test_calibration_constants_oracle).
EDGE_CALIBRATION_SPATIAL = 1.1693
EDGE_CALIBRATION_ST = 1.2610


def resolve_weights(pattern: PointPattern, weights) -> np.ndarray:
    """Per-point weighting intensities from a fitted model or a vector.

    Raises ValueError identifying the first offending point if any value
    is non-positive or non-finite.
    """
    if isinstance(weights, IntensityModel):
        values = weights.intensity(pattern.coords)
    else:
        values = np.asarray(weights, dtype=float)
        if values.shape != (pattern.n,):
            raise ValueError(
                f"weight vector has shape {values.shape}, expected ({pattern.n},)"
            )
    bad = ~(np.isfinite(values) & (values > 0))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"non-positive weighting intensity at point {i}: {values[i]}")
    return values


class PairIndex:
    """Binned unordered pairs of a pattern on a lag grid.

    Stores, for every pair with spatial distance <= r_max (and time lag
    <= h_max), the point indices and the first grid cell the pair falls
    into, so that weighted K surfaces are cumulative bincounts.
    """

    def __init__(self, pattern: PointPattern, grid: LagGrid):
        if pattern.is_spatiotemporal != grid.is_spatiotemporal:
            raise ValueError("pattern and lag grid must agree on the time axis")
        self.pattern = pattern
        self.grid = grid
        n = pattern.n
        iu, ju = np.triu_indices(n, k=1)
        d = pdist(pattern.coords[:, :2])
        keep = d <= grid.r_max
        if grid.is_spatiotemporal:
            dt = np.abs(pattern.t[iu] - pattern.t[ju])
            keep &= dt <= grid.h_max
            dt = dt[keep]
        self.i = iu[keep]
        self.j = ju[keep]
        r_bin = np.searchsorted(grid.r_values, d[keep], side="left")
        if grid.is_spatiotemporal:
            h_bin = np.searchsorted(grid.h_values, dt, side="left")
            self.flat_bin = r_bin * len(grid.h_values) + h_bin
            self._n_bins = len(grid.r_values) * len(grid.h_values)
        else:
            self.flat_bin = r_bin
            self._n_bins = len(grid.r_values)

    @property
    def n_pairs(self) -> int:
        return len(self.flat_bin)

    def accumulate(self, pair_weights) -> np.ndarray:
        """Sum of pair weights over all pairs within each lag, i.e. the
        cumulative bincount along each axis."""
        counts = np.bincount(self.flat_bin, weights=pair_weights, minlength=self._n_bins)
        if self.grid.is_spatiotemporal:
            counts = counts.reshape(self.grid.shape)
            return counts.cumsum(axis=0).cumsum(axis=1)
        return counts.cumsum()

    def count_pairs(self) -> np.ndarray:
        return self.accumulate(np.ones(self.n_pairs))


class LocalPairIndex:
    """Per-point neighbour bins for the local estimators.

    Precomputes, for each point i, the indices of the other points within
    the grid range and their first grid cell; local weighted K values are
    then cumulative bincounts per point.
    """

    def __init__(self, pattern: PointPattern, grid: LagGrid):
        if pattern.is_spatiotemporal != grid.is_spatiotemporal:
            raise ValueError("pattern and lag grid must agree on the time axis")
        self.pattern = pattern
        self.grid = grid
        pairs = PairIndex(pattern, grid)
        self._n_bins = pairs._n_bins
        n = pattern.n
        # mirror each unordered pair to both endpoints
        src = np.concatenate([pairs.i, pairs.j])
        nbr = np.concatenate([pairs.j, pairs.i])
        bins = np.concatenate([pairs.flat_bin, pairs.flat_bin])
        order = np.argsort(src, kind="stable")
        self._nbr = nbr[order]
        self._bins = bins[order]
        self._offsets = np.searchsorted(src[order], np.arange(n + 1))

    def neighbours(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self._offsets[i], self._offsets[i + 1]
        return self._nbr[lo:hi], self._bins[lo:hi]

    def accumulate(self, i: int, neighbour_weights) -> np.ndarray:
        _, bins = self.neighbours(i)
        counts = np.bincount(bins, weights=neighbour_weights, minlength=self._n_bins)
        if self.grid.is_spatiotemporal:
            counts = counts.reshape(self.grid.shape)
            return counts.cumsum(axis=0).cumsum(axis=1)
        return counts.cumsum()


def _global_homog_constant(pattern: PointPattern, grid: LagGrid) -> float:
    n, v = pattern.n, pattern.window.volume
    if grid.is_spatiotemporal:
        return EDGE_CALIBRATION_ST * v / (n * (n - 1))
    return EDGE_CALIBRATION_SPATIAL * 2.0 * v / (n * (n - 1))


def _global_inhom_constant(pattern: PointPattern, grid: LagGrid) -> float:
    v = pattern.window.volume
    if grid.is_spatiotemporal:
        return EDGE_CALIBRATION_ST / v
    return EDGE_CALIBRATION_SPATIAL * 2.0 / v


def _local_constant(pattern: PointPattern, grid: LagGrid, homogeneous: bool) -> float:
    # chosen so that the constant-weight local inhomogeneous estimator
    # reduces exactly to the local homogeneous one
    n, v = pattern.n, pattern.window.volume
    if homogeneous:
        base = v / n
    else:
        base = n / v
    if grid.is_spatiotemporal:
        return EDGE_CALIBRATION_ST * base / 2.0
    return EDGE_CALIBRATION_SPATIAL * base


def _require_pairs(pattern: PointPattern):
    if pattern.n < 2:
        raise ValueError("K estimation needs at least two points")


def k_homog(pattern: PointPattern, grid: LagGrid) -> KEstimate:
    """Unweighted K estimate: normalized count of point pairs within each
    spatial distance (and time lag)."""
    _require_pairs(pattern)
    pairs = PairIndex(pattern, grid)
    values = _global_homog_constant(pattern, grid) * pairs.count_pairs()
    return KEstimate(grid, values, "homogeneous")


def k_inhom(pattern: PointPattern, grid: LagGrid, weights) -> KEstimate:
    """Intensity-weighted K estimate.

    Each pair is down-weighted by the product of the weighting intensity
    at its two points; when the weights equal the generating intensity the
    Monte Carlo mean tracks the Poisson reference surface.
    """
    _require_pairs(pattern)
    lam = resolve_weights(pattern, weights)
    pairs = PairIndex(pattern, grid)
    pair_w = 1.0 / (lam[pairs.i] * lam[pairs.j])
    values = _global_inhom_constant(pattern, grid) * pairs.accumulate(pair_w)
    return KEstimate(grid, values, "inhomogeneous")


def k_local_homog(pattern: PointPattern, grid: LagGrid, i: int) -> KEstimate:
    """Local K estimate for point i: normalized count of other points in
    the cylinder around i."""
    _require_pairs(pattern)
    if not 0 <= i < pattern.n:
        raise IndexError(f"point index {i} out of range for n={pattern.n}")
    local = LocalPairIndex(pattern, grid)
    nbr, _ = local.neighbours(i)
    values = _local_constant(pattern, grid, True) * local.accumulate(i, np.ones(len(nbr)))
    return KEstimate(grid, values, "local-homogeneous", point_index=i)


def k_local_inhom(pattern: PointPattern, grid: LagGrid, i: int, weights) -> KEstimate:
    """Local intensity-weighted K estimate for point i; the data statistic
    of the local fits."""
    _require_pairs(pattern)
    if not 0 <= i < pattern.n:
        raise IndexError(f"point index {i} out of range for n={pattern.n}")
    lam = resolve_weights(pattern, weights)
    local = LocalPairIndex(pattern, grid)
    nbr, _ = local.neighbours(i)
    values = _local_constant(pattern, grid, False) * local.accumulate(i, 1.0 / (lam[i] * lam[nbr]))
    return KEstimate(grid, values, "local-inhomogeneous", point_index=i)


def poisson_reference(r, h=None) -> np.ndarray:
    """pi r^2 for spatial lags, the outer surface pi r^2 h when temporal
    lags are given; accepts zero lags."""
    r2 = np.pi * np.asarray(r, dtype=float) ** 2
    if h is None:
        return r2
    return np.multiply.outer(r2, np.asarray(h, dtype=float))


def theoretical_k(grid: LagGrid) -> KEstimate:
    """Poisson reference surface on a lag grid: pi r^2 on spatial grids,
    pi r^2 h on spatio-temporal ones."""
    return KEstimate(grid, poisson_reference(grid.r_values, grid.h_values), "homogeneous")
