"""Barrier-based frictional contact between affine bodies.

Broad phase: per body, the AABB of the union of start/end vertex positions
over the current search interval, inflated by half the contact accuracy
d_hat. Candidate vertex-face and edge-edge pairs are generated only inside
each pairwise overlap volume, through a shallow three-level AABB tree per
side, which keeps the pair tests local to the actual contact region.

Narrow phase: a smoothly clamped log barrier on the unsigned pair distance,
differentiated with respect to squared distance, with the near-parallel
edge-edge mollifier folded into the product rule. Friction uses normal
force magnitudes and tangent frames lagged from the previous converged
state, making the per-step potential smooth.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import project_psd
from .distance import (
    DEFAULT_MOLLIFIER_SCALE,
    edge_edge_closest,
    ee_mollifier,
    ee_mollifier_grad_hess,
    pair_distance_gradients,
    point_triangle_closest,
)
from .mesh import SurfaceMesh

__all__ = [
    "CollisionBody",
    "ContactPair",
    "CandidateSet",
    "IAabbTree",
    "FrictionData",
    "BarrierDomainError",
    "barrier",
    "barrier_d1",
    "barrier_d2",
    "barrier_distance_form",
    "broad_phase",
    "contact_energy",
    "contact_gradient_hessian",
    "friction_precompute",
    "friction_energy",
    "friction_gradient_hessian",
    "world_positions_all",
]


class BarrierDomainError(ValueError):
    """Raised when a barrier is evaluated at non-positive squared distance.

    The CCD-filtered line search must make this unreachable; hitting it
    signals a pipeline bug, never a recoverable state.
    """


# ---------------------------------------------------------------------------
# clamped log barrier
#
# B(d) = -(d - d_hat)^2 ln(d / d_hat) on 0 < d < d_hat, 0 beyond; B, B' and
# B'' all vanish at d_hat, so pairs past the contact accuracy can be culled
# without touching convergence. The functions below take squared distance
# so distance kernels never need a square root; derivatives are with
# respect to d^2 (chain rule through d = sqrt(s) stays smooth for d > 0).


def _check_domain(s):
    if np.any(s <= 0.0):
        raise BarrierDomainError(
            "barrier evaluated at non-positive squared distance "
            "(intersection reached; CCD filtering must prevent this)"
        )


def barrier_distance_form(d, d_hat):
    """Reference clamped barrier in plain distance (oracle form)."""
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -((d - d_hat) ** 2) * np.log(d / d_hat)
    return np.where(d < d_hat, val, 0.0)


def barrier(d_sq, d_hat):
    """Barrier value at squared distance d_sq; exactly 0 for d >= d_hat."""
    s = np.asarray(d_sq, dtype=float)
    _check_domain(s)
    d = np.sqrt(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = -((d - d_hat) ** 2) * np.log(d / d_hat)
    return np.where(d < d_hat, val, 0.0)


def barrier_d1(d_sq, d_hat):
    """d barrier / d (d^2)."""
    s = np.asarray(d_sq, dtype=float)
    _check_domain(s)
    d = np.sqrt(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        bd = -2.0 * (d - d_hat) * np.log(d / d_hat) - (d - d_hat) ** 2 / d
        val = bd / (2.0 * d)
    return np.where(d < d_hat, val, 0.0)


def barrier_d2(d_sq, d_hat):
    """d^2 barrier / d (d^2)^2."""
    s = np.asarray(d_sq, dtype=float)
    _check_domain(s)
    d = np.sqrt(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        bd = -2.0 * (d - d_hat) * np.log(d / d_hat) - (d - d_hat) ** 2 / d
        bdd = (
            -2.0 * np.log(d / d_hat)
            - 4.0 * (d - d_hat) / d
            + (d - d_hat) ** 2 / (d * d)
        )
        val = bdd / (4.0 * s) - bd / (4.0 * s * d)
    return np.where(d < d_hat, val, 0.0)


# ---------------------------------------------------------------------------
# collision bodies and candidate pairs


@dataclass(frozen=True)
class CollisionBody:
    """Immutable per-body collision geometry in the rest frame."""

    rest: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_rest_len_sq: np.ndarray
    dynamic: bool = True

    @classmethod
    def from_mesh(cls, mesh: SurfaceMesh, dynamic: bool = True) -> "CollisionBody":
        return cls(
            rest=mesh.vertices,
            triangles=mesh.triangles,
            edges=mesh.edges,
            edge_rest_len_sq=mesh.edge_rest_length_sq(),
            dynamic=dynamic,
        )


def world_positions_all(bodies, q_all) -> list[np.ndarray]:
    q_all = np.asarray(q_all, dtype=float).reshape(len(bodies), 12)
    return [
        b.rest @ q[3:].reshape(3, 3).T + q[:3] for b, q in zip(bodies, q_all)
    ]


@dataclass(frozen=True)
class ContactPair:
    """One inter-body primitive pairing (vertex-face or edge-edge).

    For vertex-face pairs body_a holds the vertex and body_b the face; for
    edge-edge pairs body_a < body_b.
    """

    kind: str
    body_a: int
    body_b: int
    prim_a: int
    prim_b: int

    def __post_init__(self):
        if self.body_a == self.body_b:
            raise ValueError("contact pairs are inter-body only")


@dataclass
class CandidateSet:
    """Deterministically ordered candidate pairs from one broad phase.

    vf rows: (vertex_body, vertex_idx, face_body, face_idx);
    ee rows: (body_a, edge_a, body_b, edge_b) with body_a < body_b.
    overlap_pairs lists every body pair whose interval boxes overlapped,
    which preallocates the Newton system's off-diagonal sparsity.
    """

    vf: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    ee: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    overlap_pairs: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2), dtype=np.int64)
    )
    box_tests: int = 0

    def __len__(self) -> int:
        return len(self.vf) + len(self.ee)

    def pairs(self) -> list[ContactPair]:
        out = [
            ContactPair("vertex-face", int(r[0]), int(r[2]), int(r[1]), int(r[3]))
            for r in self.vf
        ]
        out += [
            ContactPair("edge-edge", int(r[0]), int(r[2]), int(r[1]), int(r[3]))
            for r in self.ee
        ]
        return out


@dataclass
class IAabbTree:
    """Shallow (three-level, <= 7 node) tree over one body's primitives
    clipped to an overlap box; every clipped primitive sits in exactly one
    of the four leaves."""

    kinds: np.ndarray    # 0 = vertex, 1 = edge, 2 = triangle
    indices: np.ndarray  # primitive index within its kind
    lo: np.ndarray
    hi: np.ndarray
    leaf_slices: list[slice]
    leaf_lo: np.ndarray
    leaf_hi: np.ndarray


def _primitive_boxes(body: CollisionBody, vlo, vhi):
    """Interval boxes for vertices, edges, triangles from per-vertex boxes."""
    elo = np.minimum(vlo[body.edges[:, 0]], vlo[body.edges[:, 1]])
    ehi = np.maximum(vhi[body.edges[:, 0]], vhi[body.edges[:, 1]])
    t = body.triangles
    tlo = np.minimum(np.minimum(vlo[t[:, 0]], vlo[t[:, 1]]), vlo[t[:, 2]])
    thi = np.maximum(np.maximum(vhi[t[:, 0]], vhi[t[:, 1]]), vhi[t[:, 2]])
    return (vlo, vhi), (elo, ehi), (tlo, thi)


def _build_tree(kinds, indices, lo, hi) -> IAabbTree:
    n = len(kinds)
    if n == 0:
        return IAabbTree(
            kinds, indices, lo, hi, [], np.zeros((0, 3)), np.zeros((0, 3))
        )
    if n <= 64:
        # splitting tiny clipped sets costs more than it culls
        return IAabbTree(
            kinds, indices, lo, hi, [slice(0, n)],
            lo.min(axis=0)[None], hi.max(axis=0)[None],
        )
    centers = 0.5 * (lo + hi)
    # level 1 split on the widest spread axis, level 2 per half
    order = np.arange(n)
    axis0 = int(np.argmax(centers.max(axis=0) - centers.min(axis=0)))
    order = order[np.argsort(centers[order, axis0], kind="stable")]
    halves = [order[: (n + 1) // 2], order[(n + 1) // 2 :]]
    leaves = []
    for half in halves:
        if len(half) == 0:
            continue
        ch = centers[half]
        ax = int(np.argmax(ch.max(axis=0) - ch.min(axis=0)))
        half = half[np.argsort(ch[:, ax], kind="stable")]
        m = (len(half) + 1) // 2
        for part in (half[:m], half[m:]):
            if len(part):
                leaves.append(part)
    perm = np.concatenate(leaves) if leaves else np.zeros(0, dtype=np.int64)
    kinds, indices, lo, hi = kinds[perm], indices[perm], lo[perm], hi[perm]
    slices, leaf_lo, leaf_hi = [], [], []
    start = 0
    for part in leaves:
        s = slice(start, start + len(part))
        slices.append(s)
        leaf_lo.append(lo[s].min(axis=0))
        leaf_hi.append(hi[s].max(axis=0))
        start += len(part)
    return IAabbTree(
        kinds, indices, lo, hi, slices, np.asarray(leaf_lo), np.asarray(leaf_hi)
    )


def _clip_body(prim_boxes, olo, ohi) -> IAabbTree:
    parts = []
    for kind, (plo, phi) in enumerate(prim_boxes):
        keep = np.all((plo <= ohi) & (olo <= phi), axis=1)
        idx = np.nonzero(keep)[0]
        parts.append(
            (
                np.full(len(idx), kind, dtype=np.int64),
                idx.astype(np.int64),
                plo[idx],
                phi[idx],
            )
        )
    kinds = np.concatenate([p[0] for p in parts])
    indices = np.concatenate([p[1] for p in parts])
    lo = np.concatenate([p[2] for p in parts])
    hi = np.concatenate([p[3] for p in parts])
    return _build_tree(kinds, indices, lo, hi)


def _leaf_pairs(tree_a: IAabbTree, tree_b: IAabbTree):
    """Kind-compatible primitive index pairs from overlapping leaves.

    Returns (vf_ab, vf_ba, ee, n_tests): vertex(a)-tri(b), vertex(b)-tri(a),
    edge-edge pairs, and the number of primitive box pair tests performed.
    """
    vf_ab, vf_ba, ee = [], [], []
    n_tests = 0
    for sa, la_lo, la_hi in zip(tree_a.leaf_slices, tree_a.leaf_lo, tree_a.leaf_hi):
        for sb, lb_lo, lb_hi in zip(
            tree_b.leaf_slices, tree_b.leaf_lo, tree_b.leaf_hi
        ):
            if np.any(la_lo > lb_hi) or np.any(lb_lo > la_hi):
                continue
            ka, kb = tree_a.kinds[sa], tree_b.kinds[sb]
            ia, ib = tree_a.indices[sa], tree_b.indices[sb]
            alo, ahi = tree_a.lo[sa], tree_a.hi[sa]
            blo, bhi = tree_b.lo[sb], tree_b.hi[sb]
            for kind_a, kind_b, out in ((0, 2, vf_ab), (2, 0, vf_ba), (1, 1, ee)):
                ma, mb = ka == kind_a, kb == kind_b
                if not (ma.any() and mb.any()):
                    continue
                n_tests += int(ma.sum()) * int(mb.sum())
                hit = np.all(
                    (alo[ma][:, None, :] <= bhi[mb][None, :, :])
                    & (blo[mb][None, :, :] <= ahi[ma][:, None, :]),
                    axis=2,
                )
                ii, jj = np.nonzero(hit)
                if len(ii):
                    out.append(np.stack([ia[ma][ii], ib[mb][jj]], axis=1))

    def cat(parts):
        return (
            np.concatenate(parts)
            if parts
            else np.zeros((0, 2), dtype=np.int64)
        )

    return cat(vf_ab), cat(vf_ba), cat(ee), n_tests


def broad_phase(bodies, q_start, q_end, d_hat) -> CandidateSet:
    """Conservative candidate pairs over the linear interval q_start..q_end.

    Every vertex-face / edge-edge pair whose distance drops below d_hat
    anywhere along the interval is included (no false negatives); two
    bodies separated by more than d_hat along an axis at both endpoints
    produce nothing. Output ordering is canonical (sorted), so downstream
    assembly is deterministic.
    """
    n = len(bodies)
    q0 = np.asarray(q_start, dtype=float).reshape(n, 12)
    q1 = np.asarray(q_end, dtype=float).reshape(n, 12)
    h = 0.5 * d_hat  # half-inflation per side: pairwise gap budget is d_hat
    X0 = world_positions_all(bodies, q0)
    X1 = world_positions_all(bodies, q1)
    vlo = [np.minimum(a, b) - h for a, b in zip(X0, X1)]
    vhi = [np.maximum(a, b) + h for a, b in zip(X0, X1)]
    blo = np.array([v.min(axis=0) for v in vlo])
    bhi = np.array([v.max(axis=0) for v in vhi])

    prim_boxes_cache: dict[int, tuple] = {}

    def prim_boxes(i):
        if i not in prim_boxes_cache:
            prim_boxes_cache[i] = _primitive_boxes(bodies[i], vlo[i], vhi[i])
        return prim_boxes_cache[i]

    # vectorized all-pairs body box overlap
    pair_hit = np.all(
        (blo[:, None, :] <= bhi[None, :, :]) & (blo[None, :, :] <= bhi[:, None, :]),
        axis=2,
    )
    dyn = np.array([b.dynamic for b in bodies], dtype=bool)
    pair_hit &= dyn[:, None] | dyn[None, :]
    ii, jj = np.nonzero(np.triu(pair_hit, k=1))

    vf_rows, ee_rows, overlaps = [], [], []
    n_tests = 0
    for i, j in zip(ii.tolist(), jj.tolist()):
        olo = np.maximum(blo[i], blo[j])
        ohi = np.minimum(bhi[i], bhi[j])
        overlaps.append((i, j))
        tree_i = _clip_body(prim_boxes(i), olo, ohi)
        tree_j = _clip_body(prim_boxes(j), olo, ohi)
        vf_ij, vf_ji, ee_ij, tests = _leaf_pairs(tree_i, tree_j)
        n_tests += tests
        if len(vf_ij):
            rows = np.empty((len(vf_ij), 4), dtype=np.int64)
            rows[:, 0], rows[:, 1] = i, vf_ij[:, 0]
            rows[:, 2], rows[:, 3] = j, vf_ij[:, 1]
            vf_rows.append(rows)
        if len(vf_ji):
            rows = np.empty((len(vf_ji), 4), dtype=np.int64)
            rows[:, 0], rows[:, 1] = j, vf_ji[:, 1]
            rows[:, 2], rows[:, 3] = i, vf_ji[:, 0]
            vf_rows.append(rows)
        if len(ee_ij):
            rows = np.empty((len(ee_ij), 4), dtype=np.int64)
            rows[:, 0], rows[:, 1] = i, ee_ij[:, 0]
            rows[:, 2], rows[:, 3] = j, ee_ij[:, 1]
            ee_rows.append(rows)

    def canon(parts):
        if not parts:
            return np.zeros((0, 4), dtype=np.int64)
        arr = np.concatenate(parts)
        order = np.lexsort((arr[:, 3], arr[:, 1], arr[:, 2], arr[:, 0]))
        return arr[order]

    return CandidateSet(
        vf=canon(vf_rows),
        ee=canon(ee_rows),
        overlap_pairs=np.asarray(overlaps, dtype=np.int64).reshape(-1, 2),
        box_tests=n_tests,
    )


# ---------------------------------------------------------------------------
# narrow phase gathering


def _gather_vf(bodies, X, vf):
    z = np.empty((len(vf), 4, 3))
    rests = np.empty((len(vf), 4, 3))
    bv, vi, bf, ti = vf[:, 0], vf[:, 1], vf[:, 2], vf[:, 3]
    # group by body id to gather without per-row python work
    for b in np.unique(np.concatenate([bv, bf])):
        mv = bv == b
        if mv.any():
            z[mv, 0] = X[b][vi[mv]]
            rests[mv, 0] = bodies[b].rest[vi[mv]]
        mf = bf == b
        if mf.any():
            tri = bodies[b].triangles[ti[mf]]
            for k in range(3):
                z[mf, 1 + k] = X[b][tri[:, k]]
                rests[mf, 1 + k] = bodies[b].rest[tri[:, k]]
    return z, rests


def _gather_ee(bodies, X, ee):
    z = np.empty((len(ee), 4, 3))
    rests = np.empty((len(ee), 4, 3))
    eps_x = np.empty(len(ee))
    la = np.empty(len(ee))
    lb = np.empty(len(ee))
    ba, ea, bb, eb = ee[:, 0], ee[:, 1], ee[:, 2], ee[:, 3]
    for b in np.unique(np.concatenate([ba, bb])):
        ma = ba == b
        if ma.any():
            edge = bodies[b].edges[ea[ma]]
            z[ma, 0] = X[b][edge[:, 0]]
            z[ma, 1] = X[b][edge[:, 1]]
            rests[ma, 0] = bodies[b].rest[edge[:, 0]]
            rests[ma, 1] = bodies[b].rest[edge[:, 1]]
            la[ma] = bodies[b].edge_rest_len_sq[ea[ma]]
        mb = bb == b
        if mb.any():
            edge = bodies[b].edges[eb[mb]]
            z[mb, 2] = X[b][edge[:, 0]]
            z[mb, 3] = X[b][edge[:, 1]]
            rests[mb, 2] = bodies[b].rest[edge[:, 0]]
            rests[mb, 3] = bodies[b].rest[edge[:, 1]]
            lb[mb] = bodies[b].edge_rest_len_sq[eb[mb]]
    eps_x = DEFAULT_MOLLIFIER_SCALE * la * lb
    return z, rests, eps_x


def _stack_jacobian(rests, sides):
    """(N, 12, 24) map from the two bodies' stacked coords to point motion.

    Point k occupies rows 3k..3k+2; its body side selects columns 0:12 or
    12:24 with d x_a / d p = I and d x_a / d A[a, c] = rest_c.
    """
    n = len(rests)
    J = np.zeros((n, 12, 24))
    for k in range(4):
        base = 12 * sides[k]
        for a in range(3):
            J[:, 3 * k + a, base + a] = 1.0
            J[:, 3 * k + a, base + 3 + 3 * a : base + 6 + 3 * a] = rests[:, k]
    return J


_VF_SIDES = (0, 1, 1, 1)
_EE_SIDES = (0, 0, 1, 1)


def _pair_point_terms(kind, bodies, X, rows, kappa, d_hat):
    """Barrier energy terms and point-space derivatives for active pairs.

    Returns (active_rows, d2, value, grad12, hess12, rests, gamma) with the
    inactive (d >= d_hat) pairs dropped; value/grad/hess carry kappa and,
    for edge-edge, the parallel mollifier.
    """
    if kind == "vf":
        z, rests = _gather_vf(bodies, X, rows)
        eps_x = None
    else:
        z, rests, eps_x = _gather_ee(bodies, X, rows)
    if len(rows) == 0:
        e = np.zeros(0)
        return rows, e, e, np.zeros((0, 12)), np.zeros((0, 12, 12)), rests, np.zeros((0, 4))

    # cheap distance pass first: derivative kernels only for active pairs
    if kind == "vf":
        d2_all, _, _ = point_triangle_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
    else:
        d2_all, _, _, _ = edge_edge_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
    active = d2_all < d_hat * d_hat
    rows, z, rests = rows[active], z[active], rests[active]
    if len(rows) == 0:
        e = np.zeros(0)
        return rows, e, e, np.zeros((0, 12)), np.zeros((0, 12, 12)), rests, np.zeros((0, 4))
    d2, grad, hess, region, gamma = pair_distance_gradients(kind, z)

    b0 = kappa * barrier(d2, d_hat)
    b1 = kappa * barrier_d1(d2, d_hat)
    b2 = kappa * barrier_d2(d2, d_hat)
    if kind == "vf":
        val = b0
        g = b1[:, None] * grad
        H = b2[:, None, None] * np.einsum("na,nb->nab", grad, grad) + b1[
            :, None, None
        ] * hess
    else:
        eps_a = eps_x[active]
        mol, molg, molh = ee_mollifier_grad_hess(z, eps_a)
        val = mol * b0
        bgrad = b1[:, None] * grad
        g = molg * b0[:, None] + mol[:, None] * bgrad
        bH = b2[:, None, None] * np.einsum("na,nb->nab", grad, grad) + b1[
            :, None, None
        ] * hess
        H = (
            molh * b0[:, None, None]
            + np.einsum("na,nb->nab", molg, bgrad)
            + np.einsum("na,nb->nab", bgrad, molg)
            + mol[:, None, None] * bH
        )
    return rows, d2, val, g, H, rests, gamma


def candidate_min_distance_sq(bodies, q_all, candidates: CandidateSet):
    """Smallest candidate-pair squared distance, or None for an empty set.

    By broad-phase conservativeness any pair closer than d_hat appears in
    the set, so a returned value below d_hat^2 is the exact global minimum.
    """
    X = world_positions_all(bodies, q_all)
    best = np.inf
    if len(candidates.vf):
        z, _ = _gather_vf(bodies, X, candidates.vf)
        d2, _, _ = point_triangle_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
        best = min(best, float(d2.min()))
    if len(candidates.ee):
        z, _, _ = _gather_ee(bodies, X, candidates.ee)
        d2, _, _, _ = edge_edge_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
        best = min(best, float(d2.min()))
    return None if best == np.inf else best


def contact_energy(bodies, q_all, candidates: CandidateSet, kappa, d_hat) -> float:
    """kappa-scaled sum of clamped barriers over active candidate pairs.

    Value-only path (no derivative kernels): this sits inside every line
    search trial. Inactive pairs are masked out before summation, so
    dropping them from the candidate set leaves the value bitwise equal.
    """
    X = world_positions_all(bodies, q_all)
    total = 0.0
    if len(candidates.vf):
        z, _ = _gather_vf(bodies, X, candidates.vf)
        d2, _, _ = point_triangle_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
        active = d2 < d_hat * d_hat
        if active.any():
            total += float(np.sum(kappa * barrier(d2[active], d_hat)))
    if len(candidates.ee):
        z, _, eps_x = _gather_ee(bodies, X, candidates.ee)
        d2, _, _, _ = edge_edge_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
        active = d2 < d_hat * d_hat
        if active.any():
            za = z[active]
            mol = ee_mollifier(za[:, 0], za[:, 1], za[:, 2], za[:, 3], eps_x[active])
            total += float(np.sum(mol * kappa * barrier(d2[active], d_hat)))
    return total


@dataclass
class PairBlocks:
    """Local per-pair derivative blocks in two-body stacked coordinates.

    body_a / body_b follow candidate-row order. Blocks for a kinematic side
    are zeroed after the dynamic sub-block was PSD-projected on its own.
    """

    body_a: np.ndarray
    body_b: np.ndarray
    grad: np.ndarray  # (N, 24)
    hess: np.ndarray  # (N, 24, 24)
    d_sq: np.ndarray  # (N,)

    @classmethod
    def empty(cls) -> "PairBlocks":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros((0, 24)), np.zeros((0, 24, 24)), np.zeros(0))

    @classmethod
    def concatenate(cls, parts: list["PairBlocks"]) -> "PairBlocks":
        parts = [p for p in parts if len(p.body_a)] or [cls.empty()]
        if len(parts) == 1:
            return parts[0]  # avoid copying the (large) hessian stack
        return cls(
            np.concatenate([p.body_a for p in parts]),
            np.concatenate([p.body_b for p in parts]),
            np.concatenate([p.grad for p in parts]),
            np.concatenate([p.hess for p in parts]),
            np.concatenate([p.d_sq for p in parts]),
        )


def _project_pair_blocks(grad, hess, dyn_a, dyn_b, project):
    """PSD projection respecting kinematic sides.

    Kinematic blocks carry no unknowns: the dynamic sub-block is projected
    on its own (a sub-block of a projected 24x24 would differ), then the
    kinematic rows/cols are zeroed.
    """
    both = dyn_a & dyn_b
    only_a = dyn_a & ~dyn_b
    only_b = dyn_b & ~dyn_a
    if project and both.any():
        hess[both] = project_psd(hess[both])
    for mask, sl in ((only_a, slice(0, 12)), (only_b, slice(12, 24))):
        if not mask.any():
            continue
        sub = hess[np.ix_(np.nonzero(mask)[0], range(sl.start, sl.stop), range(sl.start, sl.stop))]
        if project:
            sub = project_psd(sub)
        block = np.zeros((int(mask.sum()), 24, 24))
        block[:, sl, sl] = sub
        hess[mask] = block
        gz = np.zeros((int(mask.sum()), 24))
        gz[:, sl] = grad[mask][:, sl]
        grad[mask] = gz
    return grad, hess


def contact_gradient_hessian(
    bodies, q_all, candidates: CandidateSet, kappa, d_hat, project: bool = True
) -> PairBlocks:
    """Per-pair 24-vector gradients and 24x24 (projected) Hessians.

    Pairs at d >= d_hat are dropped (they contribute exactly zero). The
    chain rule runs through the squared-distance kernels and the constant
    per-vertex Jacobians of the affine map.
    """
    X = world_positions_all(bodies, q_all)
    out = []
    for kind, rows, sides in (
        ("vf", candidates.vf, _VF_SIDES),
        ("ee", candidates.ee, _EE_SIDES),
    ):
        if len(rows) == 0:
            continue
        rows, d2, _, g12, H12, rests, _ = _pair_point_terms(
            kind, bodies, X, rows, kappa, d_hat
        )
        if len(rows) == 0:
            continue
        J = _stack_jacobian(rests, sides)
        g24 = np.einsum("npq,np->nq", J, g12)
        H24 = np.swapaxes(J, 1, 2) @ H12 @ J
        dyn_a = np.array([bodies[b].dynamic for b in rows[:, 0]])
        dyn_b = np.array([bodies[b].dynamic for b in rows[:, 2]])
        g24, H24 = _project_pair_blocks(g24, H24, dyn_a, dyn_b, project)
        out.append(PairBlocks(rows[:, 0].copy(), rows[:, 2].copy(), g24, H24, d2))
    return PairBlocks.concatenate(out)


# ---------------------------------------------------------------------------
# lagged friction
#
# Normal force magnitudes, tangent frames and closest-point coefficients
# freeze at the previous converged state; within the step the potential is
# mu * lambda * f0(|u|) with u the tangential relative displacement of the
# lagged closest points and f0 the C1 mollifier with accuracy eps_v * dt.


@dataclass
class FrictionData:
    """Struct-of-arrays of lagged friction terms for one time step."""

    body_a: np.ndarray
    body_b: np.ndarray
    lam: np.ndarray        # (N,) normal force magnitudes, >= 0
    mu: float
    tangent_map: np.ndarray  # (N, 2, 24): u = tangent_map @ (q_a, q_b) - offset
    offset: np.ndarray       # (N, 2)
    basis: np.ndarray        # (N, 3, 2) world tangent frames (diagnostic)

    def __len__(self) -> int:
        return len(self.lam)

    @classmethod
    def empty(cls, mu=0.0) -> "FrictionData":
        z = np.zeros(0, dtype=np.int64)
        return cls(
            z, z, np.zeros(0), mu, np.zeros((0, 2, 24)), np.zeros((0, 2)),
            np.zeros((0, 3, 2)),
        )


def _tangent_basis(normals):
    """Deterministic orthonormal frames perpendicular to unit normals."""
    n = normals
    pick = np.argmin(np.abs(n), axis=1)
    helper = np.eye(3)[pick]
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2], axis=2)


def friction_precompute(
    bodies, q_prev, candidates: CandidateSet, kappa, d_hat, mu
) -> FrictionData:
    """Lagged friction terms from the previous step's converged state.

    The active set is every candidate with distance below d_hat there;
    lambda_j = -kappa * dB/dd (the scalar slope of the clamped barrier at
    the lagged distance), scaled by the parallel mollifier for edge-edge
    pairs, which is non-negative because the barrier decreases on (0, d_hat).
    """
    if mu < 0:
        raise ValueError("friction coefficient must be >= 0")
    X = world_positions_all(bodies, q_prev)
    parts = []
    for kind, rows, sides in (
        ("vf", candidates.vf, _VF_SIDES),
        ("ee", candidates.ee, _EE_SIDES),
    ):
        if len(rows) == 0:
            continue
        if kind == "vf":
            z, rests = _gather_vf(bodies, X, rows)
            d2, _, bary = point_triangle_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
            gamma = np.concatenate([np.ones((len(z), 1)), -bary], axis=1)
        else:
            z, rests, eps_x = _gather_ee(bodies, X, rows)
            d2, _, s_par, t_par = edge_edge_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
            gamma = np.stack(
                [1.0 - s_par, s_par, -(1.0 - t_par), -t_par], axis=1
            )
        active = d2 < d_hat * d_hat
        if not active.any():
            continue
        rows, z, rests, gamma, d2 = (
            rows[active], z[active], rests[active], gamma[active], d2[active]
        )
        d = np.sqrt(d2)
        lam = -kappa * 2.0 * d * barrier_d1(d2, d_hat)
        if kind == "ee":
            lam = lam * ee_mollifier(z[:, 0], z[:, 1], z[:, 2], z[:, 3], eps_x[active])
        r = np.einsum("ni,nik->nk", gamma, z)
        normal = r / d[:, None]
        T = _tangent_basis(normal)
        J = _stack_jacobian(rests, sides)
        Gamma = np.zeros((len(rows), 3, 12))
        for k in range(4):
            Gamma[:, :, 3 * k : 3 * k + 3] = gamma[:, k, None, None] * np.eye(3)
        tmap = np.einsum("nkm,nkp,npq->nmq", T, Gamma, J)  # (N, 2, 24)
        qa = np.asarray(q_prev, dtype=float).reshape(len(bodies), 12)
        qpair = np.concatenate(
            [qa[rows[:, 0]], qa[rows[:, 2]]], axis=1
        )
        offset = np.einsum("nmq,nq->nm", tmap, qpair)
        parts.append(
            FrictionData(
                rows[:, 0].copy(), rows[:, 2].copy(), lam, mu, tmap, offset, T
            )
        )
    if not parts:
        return FrictionData.empty(mu)
    return FrictionData(
        np.concatenate([p.body_a for p in parts]),
        np.concatenate([p.body_b for p in parts]),
        np.concatenate([p.lam for p in parts]),
        mu,
        np.concatenate([p.tangent_map for p in parts]),
        np.concatenate([p.offset for p in parts]),
        np.concatenate([p.basis for p in parts]),
    )


def _mollifier_f(y, eps_h):
    """C1 displacement mollifier f0 and helpers f1/y, f1' (vectorized)."""
    inside = y < eps_h
    with np.errstate(divide="ignore", invalid="ignore"):
        f0 = np.where(
            inside, y * y * (1.0 - y / (3.0 * eps_h)) / eps_h + eps_h / 3.0, y
        )
        f1_over_y = np.where(inside, 2.0 / eps_h - y / (eps_h * eps_h), 1.0 / np.where(y == 0, 1.0, y))
        f1p = np.where(inside, 2.0 / eps_h - 2.0 * y / (eps_h * eps_h), 0.0)
    return f0, f1_over_y, f1p


def _friction_terms(q_all, data: FrictionData, dt, epsilon_v):
    qa = np.asarray(q_all, dtype=float).reshape(-1, 12)
    qpair = np.concatenate([qa[data.body_a], qa[data.body_b]], axis=1)
    u = np.einsum("nmq,nq->nm", data.tangent_map, qpair) - data.offset
    y = np.linalg.norm(u, axis=1)
    eps_h = epsilon_v * dt
    f0, f1_over_y, f1p = _mollifier_f(y, eps_h)
    return u, y, f0, f1_over_y, f1p


def friction_energy(q_all, data: FrictionData, dt, epsilon_v) -> float:
    """Sum of mu * lambda * f0(|u|) over the lagged active set."""
    if len(data) == 0:
        return 0.0
    _, _, f0, _, _ = _friction_terms(q_all, data, dt, epsilon_v)
    return float(np.sum(data.mu * data.lam * f0))


def friction_gradient_hessian(
    q_all, data: FrictionData, dt, epsilon_v, dynamic, project: bool = True
) -> PairBlocks:
    """Per-pair friction gradients/Hessians in stacked body coordinates.

    u is linear in q (lagged coefficients), so the Hessian is the 2x2
    displacement Hessian conjugated by the constant tangent map; PSD
    projection happens at the 2x2 level.
    """
    if len(data) == 0:
        return PairBlocks.empty()
    u, y, f0, f1_over_y, f1p = _friction_terms(q_all, data, dt, epsilon_v)
    scale = data.mu * data.lam
    gu = scale[:, None] * f1_over_y[:, None] * u  # (N, 2)
    eye2 = np.eye(2)
    with np.errstate(divide="ignore", invalid="ignore"):
        aniso = np.where(y > 0, (f1p - f1_over_y) / np.where(y == 0, 1.0, y * y), 0.0)
    Hu = scale[:, None, None] * (
        f1_over_y[:, None, None] * eye2
        + aniso[:, None, None] * np.einsum("na,nb->nab", u, u)
    )
    if project:
        Hu = project_psd(Hu)
    G = data.tangent_map
    g24 = np.einsum("nmq,nm->nq", G, gu)
    H24 = np.einsum("nmq,nml,nlr->nqr", G, Hu, G)
    dyn_a = dynamic[data.body_a]
    dyn_b = dynamic[data.body_b]
    g24, H24 = _project_pair_blocks(g24, H24, dyn_a, dyn_b, project=False)
    d2 = np.full(len(data), np.inf)
    return PairBlocks(data.body_a.copy(), data.body_b.copy(), g24, H24, d2)
