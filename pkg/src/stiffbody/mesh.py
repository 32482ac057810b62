"""Rest-pose triangulated surface meshes.

A body's collision geometry is its triangulated boundary: a vertex array,
counter-clockwise outward triangles, and the derived unique edge list.
Meshes are immutable after construction; all downstream modules treat them
as read-only.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = ["SurfaceMesh", "build_edges", "NonManifoldMeshWarning"]


class NonManifoldMeshWarning(UserWarning):
    """An edge is shared by more than two triangles.

    The mesh is still usable for contact, but volume integration
    (mass properties) rejects it.
    """


def build_edges(triangles) -> np.ndarray:
    """Unique undirected edges of a triangle list.

    Returns an (E, 2) int array with rows (min, max), sorted
    lexicographically so the ordering is deterministic. Emits
    NonManifoldMeshWarning when an edge is incident to more than two
    triangles.
    """
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if tris.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    raw = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    undirected = np.sort(raw, axis=1)
    edges, counts = np.unique(undirected, axis=0, return_counts=True)
    if np.any(counts > 2):
        bad = edges[counts > 2]
        warnings.warn(
            f"{len(bad)} non-manifold edge(s), e.g. {tuple(bad[0])}: "
            "mesh usable for contact but rejected for mass integration",
            NonManifoldMeshWarning,
            stacklevel=2,
        )
    return edges


@dataclass(frozen=True)
class SurfaceMesh:
    """Rest-frame triangle mesh with derived unique edges.

    vertices: (V, 3) float; triangles: (T, 3) int, CCW outward;
    edges: (E, 2) int, derived, each undirected edge exactly once.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        tris = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValueError("triangles must be (T, 3)")
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle index out of range")
        if tris.size:
            p, q, r = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
            areas2 = np.linalg.norm(np.cross(q - p, r - p), axis=1)
            if np.any(areas2 <= 0.0):
                bad = int(np.argmin(areas2))
                raise ValueError(f"degenerate triangle {bad} (zero rest area)")
        edges = self.edges if self.edges is not None else build_edges(tris)
        verts.flags.writeable = False
        tris.flags.writeable = False
        edges = np.ascontiguousarray(np.asarray(edges, dtype=np.int64))
        edges.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "edges", edges)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def is_closed(self) -> bool:
        """True when every undirected edge is shared by exactly two triangles
        with opposite orientation (closed, orientable surface)."""
        tris = self.triangles
        if tris.size == 0:
            return False
        directed = np.concatenate(
            [tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]
        )
        # Orientable + closed <=> every directed edge appears exactly once
        # and its reverse appears exactly once.
        _, counts = np.unique(directed, axis=0, return_counts=True)
        if np.any(counts != 1):
            return False
        undirected = np.sort(directed, axis=1)
        _, ucounts = np.unique(undirected, axis=0, return_counts=True)
        return bool(np.all(ucounts == 2))

    def edge_rest_length_sq(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.einsum("ij,ij->i", d, d)
