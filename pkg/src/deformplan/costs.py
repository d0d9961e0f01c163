"""Point-set cost functions used as planning objectives and evaluation metrics.

A particle set is a plain (n, 3) float array of positions in meters. All
four costs are pure and deterministic.

Conventions (these are choices, stated once):
* Chamfer averages plain Euclidean (not squared) nearest-neighbor
  distances over both directions.
* EMD resamples both sets to equal cardinality min(|a|, |b|, 512) by
  seeded farthest-point subsampling, then solves the assignment exactly.
* Soft IoU is sum(A*B) / sum(A + B - A*B) over splatted occupancy grids.
"""

from __future__ import annotations

import warnings
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .geometry import VoxelGrid, VoxelGridSpec, farthest_point_downsample, splat_to_voxels
from .rng import make_rng

__all__ = ["chamfer", "emd", "soft_iou", "d2cd", "ContinuousTarget", "nearest_distances"]

_EMD_MAX_POINTS = 512


def _check_particles(name: str, points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) == 0:
        raise ValueError(f"{name}: expected a nonempty (n, 3) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: coordinates must be finite")
    return arr


def nearest_distances(queries: np.ndarray, points: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Exact distance from every query to its nearest point (chunked scan)."""
    out = np.empty(len(queries))
    for start in range(0, len(queries), chunk):
        block = queries[start : start + chunk]
        out[start : start + len(block)] = cdist(block, points).min(axis=1)
    return out


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between two particle sets."""
    a = _check_particles("chamfer(a)", a)
    b = _check_particles("chamfer(b)", b)
    return float(nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


def emd(a, b, seed: int = 0) -> float:
    """Mean transport distance under the exact optimal bijection.

    Sets of unequal size are first farthest-point resampled to the smaller
    cardinality (capped at 512); the assignment itself is exact.
    """
    a = _check_particles("emd(a)", a)
    b = _check_particles("emd(b)", b)
    target = min(len(a), len(b), _EMD_MAX_POINTS)
    if len(a) != target:
        a = a[farthest_point_downsample(a, target, make_rng(seed))]
    if len(b) != target:
        b = b[farthest_point_downsample(b, target, make_rng(seed + 1))]
    if len(a) != len(b):
        raise ValueError(f"emd: cardinality mismatch after resampling ({len(a)} vs {len(b)})")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def soft_iou(a, b, spec: VoxelGridSpec) -> float:
    """Overlap ratio of the two splatted occupancy grids, in [0, 1].

    Both sets are voxelized on the same grid and reduced to their kernel
    support masks; the product / inclusion-exclusion form on those masks
    makes identical sets score exactly 1 (fractional occupancies cannot).
    If both grids come out all zero (nothing inside the grid), the result
    is defined as 0 with a warning rather than an error, so planning never
    crashes on an empty observation.
    """
    a = _check_particles("soft_iou(a)", a)
    b = _check_particles("soft_iou(b)", b)
    ga = (splat_to_voxels(a, spec).occupancy > 0.0).astype(np.float64)
    gb = (splat_to_voxels(b, spec).occupancy > 0.0).astype(np.float64)
    inter = float((ga * gb).sum())
    union = float((ga + gb - ga * gb).sum())
    if union == 0.0:
        warnings.warn("soft_iou: both occupancy grids are empty; returning 0")
        return 0.0
    return inter / union


class ContinuousTarget:
    """Target region for one-directional distance costs.

    Backed either by a dense sample set of the region or by an analytic
    distance oracle mapping points to their distance from the region
    (0 for points inside or on the boundary, positive outside).
    """

    def __init__(self, samples: np.ndarray | None = None, distance_fn: Callable | None = None):
        if (samples is None) == (distance_fn is None):
            raise ValueError("ContinuousTarget: provide exactly one of samples / distance_fn")
        self.samples = None if samples is None else _check_particles("target samples", samples)
        self._distance_fn = distance_fn

    @staticmethod
    def from_samples(samples) -> "ContinuousTarget":
        return ContinuousTarget(samples=samples)

    @staticmethod
    def from_distance_fn(fn: Callable) -> "ContinuousTarget":
        """``fn`` maps an (n, 3) array to (n,) distances, clamped at 0 inside."""
        return ContinuousTarget(distance_fn=fn)

    def distances(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.samples is not None:
            return nearest_distances(points, self.samples)
        d = np.asarray(self._distance_fn(points), dtype=np.float64).reshape(len(points))
        return np.maximum(d, 0.0)


def d2cd(particles, target) -> float:
    """Mean distance from each particle to a continuous target region.

    One-directional: uncovered parts of the target cost nothing. ``target``
    may be a ContinuousTarget or a raw sample array.
    """
    particles = _check_particles("d2cd(particles)", particles)
    if not isinstance(target, ContinuousTarget):
        target = ContinuousTarget.from_samples(target)
    return float(target.distances(particles).mean())
