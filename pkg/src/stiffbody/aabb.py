"""Axis-aligned bounding boxes used for broad-phase culling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Aabb:
    """Closed axis-aligned box, lo <= hi componentwise."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("Aabb corners must be 3-vectors")
        if np.any(lo > hi):
            raise ValueError("Aabb requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)


def aabb_of(points, inflation: float = 0.0) -> Aabb:
    """Bounding box of a point set, each face pushed out by `inflation`."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("aabb_of needs at least one point")
    if inflation < 0:
        raise ValueError("inflation must be >= 0")
    return Aabb(pts.min(axis=0) - inflation, pts.max(axis=0) + inflation)


def aabb_overlap(a: Aabb, b: Aabb) -> Aabb | None:
    """Intersection of two boxes, or None if they are disjoint.

    Closed-interval convention: boxes touching at a face/edge/corner count
    as overlapping (zero-thickness result), so culling stays conservative.
    """
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    if np.any(lo > hi):
        return None
    return Aabb(lo, hi)


def boxes_of_points(points: np.ndarray, inflation: float = 0.0):
    """Per-point degenerate boxes as (lo, hi) arrays; vectorized helper."""
    pts = np.asarray(points, dtype=float)
    return pts - inflation, pts + inflation


def boxes_overlap_mask(lo_a, hi_a, lo_b, hi_b) -> np.ndarray:
    """Elementwise closed-interval overlap test on broadcastable box arrays."""
    return np.all((lo_a <= hi_b) & (lo_b <= hi_a), axis=-1)
