"""Procedural closed meshes used by scenes and tests."""
from __future__ import annotations

import numpy as np

from .mesh import SurfaceMesh

__all__ = ["box_mesh", "icosphere_mesh", "wedge_mesh", "prism_mesh"]

# 12 CCW-outward triangles of the canonical [-1, 1]^3 cube corner ordering
_BOX_TRIS = np.array(
    [
        (0, 2, 1), (0, 3, 2),  # z = -1
        (4, 5, 6), (4, 6, 7),  # z = +1
        (0, 1, 5), (0, 5, 4),  # y = -1
        (2, 3, 7), (2, 7, 6),  # y = +1
        (0, 4, 7), (0, 7, 3),  # x = -1
        (1, 2, 6), (1, 6, 5),  # x = +1
    ],
    dtype=np.int64,
)

_BOX_CORNERS = np.array(
    [
        (-1, -1, -1), (1, -1, -1), (1, 1, -1), (-1, 1, -1),
        (-1, -1, 1), (1, -1, 1), (1, 1, 1), (-1, 1, 1),
    ],
    dtype=float,
)


def box_mesh(size=1.0, center=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Axis-aligned closed box; `size` is a scalar or per-axis extents."""
    half = 0.5 * np.broadcast_to(np.asarray(size, dtype=float), (3,))
    verts = _BOX_CORNERS * half + np.asarray(center, dtype=float)
    return SurfaceMesh(verts, _BOX_TRIS)


def hexahedron_mesh(corners) -> SurfaceMesh:
    """Closed box-topology mesh over 8 corners in _BOX_CORNERS order."""
    verts = np.asarray(corners, dtype=float).reshape(8, 3)
    return SurfaceMesh(verts, _BOX_TRIS)


def oriented_hexahedron(corners) -> SurfaceMesh:
    """Hexahedron with outward orientation regardless of corner handedness."""
    mesh = hexahedron_mesh(corners)
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    vol = np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0
    if vol < 0:
        mesh = SurfaceMesh(mesh.vertices, mesh.triangles[:, ::-1])
    return mesh


def icosphere_mesh(radius=1.0, subdivisions=1, center=(0.0, 0.0, 0.0)) -> SurfaceMesh:
    """Closed icosphere; subdivisions=k gives 20 * 4^k triangles."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts[0])
    tris = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_tris = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        tris = new_tris
    v = np.asarray(verts) * radius + np.asarray(center, dtype=float)
    return SurfaceMesh(v, np.asarray(tris, dtype=np.int64))


def wedge_mesh(theta0, theta1, r_inner, r_outer, depth) -> SurfaceMesh:
    """Annular-sector prism (arch voussoir) in the xz plane, extruded in y.

    The sector spans angles [theta0, theta1] measured from the +x axis,
    radii [r_inner, r_outer], and depth along y centered at 0.
    """
    def ring(theta, r):
        return np.array([r * np.cos(theta), 0.0, r * np.sin(theta)])

    hy = np.array([0.0, 0.5 * depth, 0.0])
    # corner layout matches _BOX_CORNERS with x -> angular, y -> depth, z -> radial
    c = [
        ring(theta0, r_inner) - hy, ring(theta1, r_inner) - hy,
        ring(theta1, r_outer) - hy, ring(theta0, r_outer) - hy,
        ring(theta0, r_inner) + hy, ring(theta1, r_inner) + hy,
        ring(theta1, r_outer) + hy, ring(theta0, r_outer) + hy,
    ]
    verts = np.asarray(c)
    verts = verts - verts.mean(axis=0)
    mesh = hexahedron_mesh(verts)
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    vol = np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0
    if vol < 0:  # keep outward orientation regardless of sector handedness
        mesh = SurfaceMesh(mesh.vertices, mesh.triangles[:, ::-1])
    return mesh


def prism_mesh(n_sides=6, radius=1.0, height=1.0, axis=2) -> SurfaceMesh:
    """Closed regular prism (rotor/gear blank) about a coordinate axis."""
    ang = 2.0 * np.pi * np.arange(n_sides) / n_sides
    circ = np.stack([np.cos(ang), np.sin(ang)], axis=1) * radius
    lo = np.zeros((n_sides, 3))
    hi = np.zeros((n_sides, 3))
    in_plane = [i for i in range(3) if i != axis]
    lo[:, in_plane] = circ
    hi[:, in_plane] = circ
    lo[:, axis] = -0.5 * height
    hi[:, axis] = 0.5 * height
    verts = np.concatenate([lo, hi, [[0.0] * 3, [0.0] * 3]])
    verts[-2, axis] = -0.5 * height
    verts[-1, axis] = 0.5 * height
    c_lo, c_hi = 2 * n_sides, 2 * n_sides + 1
    tris = []
    for i in range(n_sides):
        j = (i + 1) % n_sides
        tris += [(i, j, n_sides + j), (i, n_sides + j, n_sides + i)]
        tris += [(c_lo, j, i), (c_hi, n_sides + i, n_sides + j)]
    mesh = SurfaceMesh(verts, np.asarray(tris, dtype=np.int64))
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    vol = np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0
    if vol < 0:
        mesh = SurfaceMesh(mesh.vertices, mesh.triangles[:, ::-1])
    return mesh
