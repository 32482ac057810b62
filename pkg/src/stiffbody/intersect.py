"""Exact triangle-triangle intersection tests.

Used only by the post-hoc intersection audit, never on the hot path.
Separating-axis formulation over closed triangles: candidate axes are the
two face normals, the nine edge-pair cross products, and the six in-plane
edge normals (the latter make coplanar separation detectable). Touching
counts as intersecting (closed-set convention).
"""
from __future__ import annotations

import numpy as np

__all__ = ["triangles_intersect", "triangles_intersect_batch"]

_AXIS_EPS = 1e-30


def triangles_intersect_batch(tri_a: np.ndarray, tri_b: np.ndarray) -> np.ndarray:
    """Vectorized intersection test; tri_a, tri_b are (N, 3, 3)."""
    ta = np.asarray(tri_a, dtype=float).reshape(-1, 3, 3)
    tb = np.asarray(tri_b, dtype=float).reshape(-1, 3, 3)
    n = len(ta)
    ea = np.stack([ta[:, 1] - ta[:, 0], ta[:, 2] - ta[:, 1], ta[:, 0] - ta[:, 2]], axis=1)
    eb = np.stack([tb[:, 1] - tb[:, 0], tb[:, 2] - tb[:, 1], tb[:, 0] - tb[:, 2]], axis=1)
    na = np.cross(ea[:, 0], ea[:, 1])
    nb = np.cross(eb[:, 0], eb[:, 1])

    axes = [na[:, None, :], nb[:, None, :]]
    # edge-edge cross axes (9)
    axes.append(np.cross(ea[:, :, None, :], eb[:, None, :, :]).reshape(n, 9, 3))
    # in-plane edge normals (6), needed for the coplanar case
    axes.append(np.cross(ea, na[:, None, :]))
    axes.append(np.cross(eb, nb[:, None, :]))
    axes = np.concatenate(axes, axis=1)  # (N, 17, 3)

    proj_a = np.einsum("nak,npk->nap", axes, ta)  # (N, 17, 3)
    proj_b = np.einsum("nak,npk->nap", axes, tb)
    min_a, max_a = proj_a.min(axis=2), proj_a.max(axis=2)
    min_b, max_b = proj_b.min(axis=2), proj_b.max(axis=2)
    degenerate = np.einsum("nak,nak->na", axes, axes) <= _AXIS_EPS
    separated = (min_a > max_b) | (min_b > max_a)
    return ~np.any(separated & ~degenerate, axis=1)


def triangles_intersect(tri_a, tri_b) -> bool:
    """Exact yes/no intersection of two closed, non-degenerate triangles."""
    ta = np.asarray(tri_a, dtype=float).reshape(1, 3, 3)
    tb = np.asarray(tri_b, dtype=float).reshape(1, 3, 3)
    for t in (ta, tb):
        if np.linalg.norm(np.cross(t[0, 1] - t[0, 0], t[0, 2] - t[0, 0])) == 0.0:
            raise ValueError("degenerate triangle in triangles_intersect")
    return bool(triangles_intersect_batch(ta, tb)[0])
