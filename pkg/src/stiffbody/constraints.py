"""Joint constraints through virtual-tetrahedron reparameterization.

A non-degenerate proxy tetrahedron parameterizes a body's 12 coordinates
linearly: with rest proxy vertices P_bar (3x4, centroid at the body-frame
origin) and deformed vertices P,

    p = (1/4) sum_i (p_i - pbar_i),    A = P P_bar^T (P_bar P_bar^T)^{-1},

which recovers (p, A) exactly whenever P = A P_bar + p 1^T. Since the map
is affine with a constant Jacobian G, joints become linear equalities on
the proxy vertex entries: fixing a vertex pins a world point, sharing a
vertex between two bodies welds those points, and an edge of two fixed (or
shared) vertices forms a rotation axis (hinge). Fixed/shared entries are
eliminated from the unknown vector rather than penalized, so the reduced
system inherits every descent and non-intersection property unchanged.

The centroid-zero requirement on P_bar is what makes the recovery exact:
without it, P P_bar^T (P_bar P_bar^T)^{-1} picks up a translation-coupled
term. Tetrahedra are re-centered at construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import BodyCoords

__all__ = [
    "VirtualTet",
    "ReparamMap",
    "phi",
    "reparam_map",
    "build_constrained_system",
    "constrain_linear",
    "Reduction",
    "make_axis_tet",
    "make_free_tet",
    "regular_tet_vertices",
    "tet_world_vertices",
]

_DEGENERACY_TOL = 1e-10


def _vec(P: np.ndarray) -> np.ndarray:
    """Vertex-major vectorization: entries 3k..3k+2 hold proxy vertex k."""
    return np.asarray(P, dtype=float).T.reshape(12)


def _unvec(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape(4, 3).T


@dataclass(frozen=True)
class VirtualTet:
    """Proxy tetrahedron with per-entry fixing and cross-body vertex links.

    rest_vertices: 3x4, re-centered to centroid zero at construction.
    fixed_dof_mask: 12 bools over the vertex-major vec(P) entries.
    shared_vertex_links: (local_vertex, other_body, other_vertex) triples;
    linked vertices share unknowns (hinges share an axis edge's two).
    """

    rest_vertices: np.ndarray
    fixed_dof_mask: np.ndarray = field(
        default_factory=lambda: np.zeros(12, dtype=bool)
    )
    shared_vertex_links: tuple = ()

    def __post_init__(self):
        P = np.asarray(self.rest_vertices, dtype=float).reshape(3, 4).copy()
        P -= P.mean(axis=1, keepdims=True)
        gram = P @ P.T
        if abs(np.linalg.det(gram)) <= _DEGENERACY_TOL * max(
            1.0, np.linalg.norm(P) ** 6
        ):
            raise ValueError("degenerate virtual tetrahedron (coplanar proxy)")
        mask = np.asarray(self.fixed_dof_mask, dtype=bool).reshape(12).copy()
        object.__setattr__(self, "rest_vertices", P)
        object.__setattr__(self, "fixed_dof_mask", mask)
        object.__setattr__(self, "shared_vertex_links", tuple(self.shared_vertex_links))


def phi(P, P_bar) -> BodyCoords:
    """Affine coordinates recovered from deformed proxy vertices.

    Exact inverse of P = A P_bar + p 1^T for centered P_bar.
    """
    P = np.asarray(P, dtype=float).reshape(3, 4)
    P_bar = np.asarray(P_bar, dtype=float).reshape(3, 4)
    gram = P_bar @ P_bar.T
    try:
        inv = np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular proxy Gram matrix") from exc
    p = (P - P_bar).mean(axis=1)
    A = P @ P_bar.T @ inv
    return BodyCoords.from_parts(p, A)


@dataclass(frozen=True)
class ReparamMap:
    """Constant affine map q = G vec(P) + q_offset (vertex-major vec)."""

    G: np.ndarray
    q_offset: np.ndarray

    def apply(self, vec_P: np.ndarray) -> np.ndarray:
        return self.G @ vec_P + self.q_offset


def reparam_map(P_bar) -> ReparamMap:
    """The constant Jacobian of phi, built column by column."""
    P_bar = np.asarray(P_bar, dtype=float).reshape(3, 4)
    offset = phi(np.zeros((3, 4)), P_bar).q
    G = np.empty((12, 12))
    for k in range(12):
        e = np.zeros(12)
        e[k] = 1.0
        G[:, k] = phi(_unvec(e), P_bar).q - offset
    return ReparamMap(G, offset)


def tet_world_vertices(q, P_bar) -> np.ndarray:
    """Deformed proxy vertices P = A P_bar + p 1^T for coordinates q."""
    q = np.asarray(q, dtype=float).reshape(12)
    A = q[3:].reshape(3, 3)
    return A @ np.asarray(P_bar, dtype=float).reshape(3, 4) + q[:3, None]


def regular_tet_vertices(size: float = 1.0) -> np.ndarray:
    """Centered regular tetrahedron with circumradius ~ size."""
    P = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float
    ).T / np.sqrt(3.0)
    return size * P


def _rotation_onto(src, dst):
    """Rotation taking unit vector src to unit vector dst (Rodrigues)."""
    src = src / np.linalg.norm(src)
    dst = dst / np.linalg.norm(dst)
    v = np.cross(src, dst)
    c = float(src @ dst)
    if np.linalg.norm(v) < 1e-12:
        if c > 0:
            return np.eye(3)
        helper = np.eye(3)[int(np.argmin(np.abs(src)))]
        axis = np.cross(src, helper)
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def make_free_tet(direction=(0.0, 0.0, 1.0), size: float = 1.0) -> VirtualTet:
    """Default proxy: a regular tetrahedron with edge (0,1) rotated onto
    `direction`, centered at the body origin. No entries fixed."""
    P = regular_tet_vertices(size)
    edge = P[:, 1] - P[:, 0]
    R = _rotation_onto(edge, np.asarray(direction, dtype=float))
    return VirtualTet(R @ P)


def make_axis_tet(point, direction, size: float = 1.0, fix_edge: bool = True) -> VirtualTet:
    """Proxy tetrahedron with edge (vertex 1, vertex 3) on the body-frame
    line {point + t * direction}; fixing that edge pins the rotation axis.

    Centroid-zero and an edge through the origin are incompatible (the four
    vertices become coplanar), so the axis line must keep a positive
    perpendicular distance from the body-frame origin; callers re-origin
    the body's rest frame when needed.
    """
    a = np.asarray(point, dtype=float).reshape(3)
    d = np.asarray(direction, dtype=float).reshape(3)
    d = d / np.linalg.norm(d)
    c0 = a - (a @ d) * d  # foot of the perpendicular from the origin
    c = np.linalg.norm(c0)
    if c < 1e-9 * max(1.0, size):
        raise ValueError(
            "axis through the body-frame origin admits no centered proxy "
            "tetrahedron; shift the body's rest origin off the axis first"
        )
    w_dir = np.cross(c0 / c, d)
    w = size * w_dir
    v1 = c0 + size * d
    v3 = c0 - size * d
    v0 = -c0 + w
    v2 = -c0 - w
    P = np.stack([v0, v1, v2, v3], axis=1)
    mask = np.zeros(12, dtype=bool)
    if fix_edge:
        mask[3:6] = True   # vertex 1
        mask[9:12] = True  # vertex 3
    return VirtualTet(P, mask)


AXIS_EDGE_VERTICES = (1, 3)


# ---------------------------------------------------------------------------
# reduced unknown layout


@dataclass
class Reduction:
    """Affine embedding q_dyn = T u + q_const of the reduced unknowns.

    Rows cover the stacked coordinates of dynamic bodies (12 each, in
    dynamic-slot order). Bodies without a proxy keep identity blocks;
    proxy bodies route through their constant reparameterization with
    fixed entries folded into q_const and linked entries sharing columns.
    """

    T: np.ndarray
    q_const: np.ndarray
    n_unknowns: int
    entry_maps: dict  # body slot -> (S rows selecting u, const entries) for proxies
    dyn_slots: dict   # body index -> dynamic slot

    def expand(self, u: np.ndarray) -> np.ndarray:
        return self.T @ u + self.q_const

    def reduce_gradient(self, g: np.ndarray) -> np.ndarray:
        return self.T.T @ g

    def reduce_hessian(self, H: np.ndarray) -> np.ndarray:
        return self.T.T @ H @ self.T

    def extract_u(self, q_dyn: np.ndarray) -> np.ndarray:
        """Least-squares unknowns for a (consistent) stacked configuration."""
        u, *_ = np.linalg.lstsq(self.T, q_dyn - self.q_const, rcond=None)
        return u

    def extract_u_rate(self, q_dot_dyn: np.ndarray) -> np.ndarray:
        """Reduced rates for a stacked generalized velocity (pure linear)."""
        u, *_ = np.linalg.lstsq(self.T, q_dot_dyn, rcond=None)
        return u

    def proxy_vertex_entries(self, body: int, u: np.ndarray) -> np.ndarray:
        """vec(P) of a proxy body straight from the unknowns (authoritative:
        shared entries are bitwise identical across linked bodies)."""
        S, const = self.entry_maps[body]
        return S @ u + const


def build_constrained_system(
    dynamic_flags, tets: dict[int, VirtualTet], initial_q
) -> Reduction:
    """Reduced unknown layout from per-body proxies, masks, and links.

    dynamic_flags: per-body bools; tets maps body index -> VirtualTet.
    initial_q: (B, 12) initial coordinates, used to value fixed entries and
    to verify linked vertices coincide at load. Raises when a body ends up
    with no free DOFs, when links touch kinematic bodies, or when linked
    vertices disagree at load.
    """
    dynamic_flags = np.asarray(dynamic_flags, dtype=bool)
    initial_q = np.asarray(initial_q, dtype=float).reshape(len(dynamic_flags), 12)
    dyn_bodies = [b for b, d in enumerate(dynamic_flags) if d]
    dyn_slots = {b: s for s, b in enumerate(dyn_bodies)}
    for b in tets:
        if not dynamic_flags[b]:
            raise ValueError(f"kinematic body {b} cannot carry a virtual tet")

    # union-find over (body, vertex) nodes
    parent: dict[tuple[int, int], tuple[int, int]] = {}

    def find(x):
        while parent.get(x, x) != x:
            parent[x] = parent.get(parent[x], parent[x])
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[max(rx, ry)] = min(rx, ry)

    for b, tet in tets.items():
        for (local_v, other_b, other_v) in tet.shared_vertex_links:
            if other_b not in tets:
                raise ValueError(
                    f"body {b} links vertex {local_v} to body {other_b} "
                    "which has no virtual tet"
                )
            union((b, int(local_v)), (int(other_b), int(other_v)))

    # initial proxy vertex values per body
    init_vecP = {
        b: _vec(tet_world_vertices(initial_q[b], tet.rest_vertices))
        for b, tet in tets.items()
    }

    # resolve per-group fixed components and representative values
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for b, tet in tets.items():
        for v in range(4):
            groups.setdefault(find((b, v)), []).append((b, v))

    group_fixed = {}
    group_value = {}
    for root, members in groups.items():
        fixed = np.zeros(3, dtype=bool)
        for (b, v) in members:
            fixed |= tets[b].fixed_dof_mask[3 * v : 3 * v + 3]
        vals = np.stack([init_vecP[b][3 * v : 3 * v + 3] for (b, v) in members])
        if len(members) > 1 and not np.allclose(
            vals, vals[0], rtol=0, atol=1e-9 * max(1.0, np.abs(vals).max())
        ):
            raise ValueError(
                f"linked proxy vertices {members} do not coincide at load"
            )
        group_fixed[root] = fixed
        group_value[root] = vals[0]

    # assign unknown columns in dynamic-body order
    col_of: dict[tuple[tuple[int, int], int], int] = {}
    identity_col: dict[int, int] = {}
    n_u = 0
    for b in dyn_bodies:
        if b in tets:
            for v in range(4):
                root = find((b, v))
                for comp in range(3):
                    key = (root, comp)
                    if group_fixed[root][comp] or key in col_of:
                        continue
                    col_of[key] = n_u
                    n_u += 1
        else:
            identity_col[b] = n_u
            n_u += 12
    if n_u == 0:
        raise ValueError("over-constrained system: no free DOFs remain")

    n_rows = 12 * len(dyn_bodies)
    T = np.zeros((n_rows, n_u))
    q_const = np.zeros(n_rows)
    entry_maps = {}
    for b in dyn_bodies:
        r0 = 12 * dyn_slots[b]
        if b not in tets:
            c0 = identity_col[b]
            T[r0 : r0 + 12, c0 : c0 + 12] = np.eye(12)
            continue
        tet = tets[b]
        G = reparam_map(tet.rest_vertices)
        S = np.zeros((12, n_u))
        const = np.zeros(12)
        free_dofs = 0
        for v in range(4):
            root = find((b, v))
            for comp in range(3):
                entry = 3 * v + comp
                if group_fixed[root][comp]:
                    const[entry] = group_value[root][comp]
                else:
                    S[entry, col_of[(root, comp)]] = 1.0
                    free_dofs += 1
        if free_dofs == 0:
            raise ValueError(f"body {b} is over-constrained (no free DOFs)")
        T[r0 : r0 + 12] = G.G @ S
        q_const[r0 : r0 + 12] = G.G @ const + G.q_offset
        entry_maps[b] = (S, const)
    return Reduction(T, q_const, n_u, entry_maps, dyn_slots)


def constrain_linear(reduction: Reduction, C_q: np.ndarray, rhs: np.ndarray,
                     tol: float = 1e-9) -> Reduction:
    """Eliminate general linear equalities C_q q_dyn = rhs by substitution.

    Rows are given over the stacked dynamic coordinates (angle/shearing
    constraints, extra anchors); they are pulled back through the current
    reduction and replaced by a particular solution plus a nullspace basis,
    so the constraint holds exactly rather than by penalty. Raises when
    the rows are inconsistent at load or no free DOFs remain.
    """
    C_q = np.atleast_2d(np.asarray(C_q, dtype=float))
    rhs = np.asarray(rhs, dtype=float).reshape(C_q.shape[0])
    C_u = C_q @ reduction.T
    d = rhs - C_q @ reduction.q_const
    u_p, *_ = np.linalg.lstsq(C_u, d, rcond=None)
    if np.linalg.norm(C_u @ u_p - d) > tol * max(1.0, np.linalg.norm(d)):
        raise ValueError("inconsistent linear constraint rows at load")
    _, s, Vt = np.linalg.svd(C_u)
    rank = int(np.sum(s > tol * max(1.0, s[0] if len(s) else 0.0)))
    N = Vt[rank:].T
    if N.shape[1] == 0:
        raise ValueError("over-constrained system: no free DOFs remain")
    new_entry_maps = {
        b: (S @ N, S @ u_p + const)
        for b, (S, const) in reduction.entry_maps.items()
    }
    return Reduction(
        reduction.T @ N,
        reduction.T @ u_p + reduction.q_const,
        N.shape[1],
        new_entry_maps,
        reduction.dyn_slots,
    )


def axis_anchor_rows(body_slot: int, n_dyn: int, point, direction, q_body,
                     arm: float = 1.0):
    """Equality rows pinning two body-frame points on an axis line in space.

    Returns (C_q, rhs) over the stacked dynamic coordinates: the world
    positions of point +- arm * direction (body frame) are frozen at their
    load values, leaving rotation about that line (plus the stiffened
    non-rigid modes) free. Used when a body's proxy edge is already claimed
    by another joint.
    """
    from .body import jacobian, world_position

    a = np.asarray(point, dtype=float).reshape(3)
    d = np.asarray(direction, dtype=float).reshape(3)
    d = d / np.linalg.norm(d)
    C = np.zeros((6, 12 * n_dyn))
    rhs = np.zeros(6)
    for k, tau in enumerate((arm, -arm)):
        x_bar = a + tau * d
        C[3 * k : 3 * k + 3, 12 * body_slot : 12 * body_slot + 12] = jacobian(x_bar)
        rhs[3 * k : 3 * k + 3] = world_position(q_body, x_bar)
    return C, rhs
