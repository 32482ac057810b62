"""Unsigned squared-distance kernels for vertex-triangle and edge-edge pairs.

Everything works in squared distances so no square roots appear in the
inner loops; the barrier chain rule downstream differentiates with respect
to d^2 as well. All kernels are batched over a leading pair axis; the
scalar API wraps batch size one.

Closest-feature classification follows the lower-dimensional-feature-wins
convention on exact ties (vertex over edge over interior) so gradients are
deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

__all__ = [
    "PTRegion",
    "EERegion",
    "DistanceResult",
    "point_triangle_distance_sq",
    "edge_edge_distance_sq",
    "point_triangle_closest",
    "edge_edge_closest",
    "pair_distance_gradients",
    "ee_mollifier",
    "ee_mollifier_grad_hess",
    "DEFAULT_MOLLIFIER_SCALE",
]

# Edge-edge pairs with squared cross-product norm below
# DEFAULT_MOLLIFIER_SCALE * |ea|^2 |eb|^2 (rest lengths) get their barrier
# scaled down to remove the C0 kink of near-parallel edge distance.
DEFAULT_MOLLIFIER_SCALE = 1e-3

_PARALLEL_REL_TOL = 1e-12


class PTRegion(IntEnum):
    VERT0 = 0
    VERT1 = 1
    VERT2 = 2
    EDGE01 = 3
    EDGE12 = 4
    EDGE20 = 5
    INTERIOR = 6


class EERegion(IntEnum):
    """3 * (edge-a feature) + (edge-b feature); feature 0/1 = endpoint, 2 = interior."""

    A0_B0 = 0
    A0_B1 = 1
    A0_INT = 2
    A1_B0 = 3
    A1_B1 = 4
    A1_INT = 5
    INT_B0 = 6
    INT_B1 = 7
    INT_INT = 8


@dataclass(frozen=True)
class DistanceResult:
    """Squared distance plus the closest-feature subcase.

    ee_parallel_mollifier is in [0, 1] for edge-edge pairs (1 when the
    edges are far from parallel) and exactly 1 for vertex-face pairs.
    """

    d_sq: float
    region: IntEnum
    ee_parallel_mollifier: float = 1.0


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


# ---------------------------------------------------------------------------
# point-triangle


def point_triangle_closest(p, t0, t1, t2):
    """Batched closest point on triangle: (d_sq, region, bary).

    Inputs broadcast as (N, 3). bary is (N, 3) over (t0, t1, t2). The
    classification cascade checks vertices, then edges, then the interior,
    so ties resolve to the lower-dimensional feature.
    """
    p, t0, t1, t2 = np.atleast_2d(p, t0, t1, t2)
    ab = t1 - t0
    ac = t2 - t0
    ap = p - t0
    d1 = _dot(ab, ap)
    d2 = _dot(ac, ap)
    bp = p - t1
    d3 = _dot(ab, bp)
    d4 = _dot(ac, bp)
    cp = p - t2
    d5 = _dot(ab, cp)
    d6 = _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = len(p)
    region = np.full(n, int(PTRegion.INTERIOR), dtype=np.int64)
    bary = np.zeros((n, 3))
    done = np.zeros(n, dtype=bool)

    def claim(mask, reg, w):
        take = mask & ~done
        region[take] = int(reg)
        bary[take] = w if w.ndim == 1 else w[take]
        done[take] = True

    claim((d1 <= 0) & (d2 <= 0), PTRegion.VERT0, np.array([1.0, 0.0, 0.0]))
    claim((d3 >= 0) & (d4 <= d3), PTRegion.VERT1, np.array([0.0, 1.0, 0.0]))
    claim((d6 >= 0) & (d5 <= d6), PTRegion.VERT2, np.array([0.0, 0.0, 1.0]))

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 != d3, d1 / (d1 - d3), 0.0)
        w_ab = np.stack([1.0 - v_ab, v_ab, np.zeros(n)], axis=1)
        claim((vc <= 0) & (d1 >= 0) & (d3 <= 0), PTRegion.EDGE01, w_ab)

        w_ac = np.where(d2 != d6, d2 / (d2 - d6), 0.0)
        w_ac_b = np.stack([1.0 - w_ac, np.zeros(n), w_ac], axis=1)
        claim((vb <= 0) & (d2 >= 0) & (d6 <= 0), PTRegion.EDGE20, w_ac_b)

        denom_bc = (d4 - d3) + (d5 - d6)
        w_bc = np.where(denom_bc != 0, (d4 - d3) / denom_bc, 0.0)
        w_bc_b = np.stack([np.zeros(n), 1.0 - w_bc, w_bc], axis=1)
        claim(
            (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), PTRegion.EDGE12, w_bc_b
        )

        total = va + vb + vc
        v_in = np.where(total != 0, vb / total, 0.0)
        w_in = np.where(total != 0, vc / total, 0.0)
        w_int = np.stack([1.0 - v_in - w_in, v_in, w_in], axis=1)
        claim(np.ones(n, dtype=bool), PTRegion.INTERIOR, w_int)

    closest = (
        bary[:, 0:1] * t0 + bary[:, 1:2] * t1 + bary[:, 2:3] * t2
    )
    diff = p - closest
    return _dot(diff, diff), region, bary


def point_triangle_distance_sq(p, t0, t1, t2) -> DistanceResult:
    """Exact squared distance from a point to a closed triangle."""
    t0a, t1a, t2a = (np.asarray(v, dtype=float) for v in (t0, t1, t2))
    nrm = np.cross(t1a - t0a, t2a - t0a)
    if np.linalg.norm(nrm) == 0.0:
        raise ValueError("degenerate triangle in point_triangle_distance_sq")
    d2, region, _ = point_triangle_closest(p, t0a, t1a, t2a)
    return DistanceResult(float(d2[0]), PTRegion(int(region[0])))


# ---------------------------------------------------------------------------
# edge-edge


def edge_edge_closest(a0, a1, b0, b1):
    """Batched closest points between closed segments: (d_sq, region, s, t).

    s parameterizes a0->a1, t parameterizes b0->b1. Near-parallel pairs
    (cross-product norm below a relative tolerance) are classified through
    an endpoint, never as interior-interior.
    """
    a0, a1, b0, b1 = np.atleast_2d(a0, a1, b0, b1)
    da = a1 - a0
    db = b1 - b0
    r = a0 - b0
    a = _dot(da, da)
    e = _dot(db, db)
    f = _dot(db, r)
    c = _dot(da, r)
    b = _dot(da, db)
    denom = a * e - b * b  # = |da x db|^2 >= 0

    parallel = denom <= _PARALLEL_REL_TOL * a * e
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(parallel, 0.0, np.clip((b * f - c * e) / np.where(denom == 0, 1.0, denom), 0.0, 1.0))
        t = (b * s + f) / e
        t_lo = t <= 0.0
        t_hi = t >= 1.0
        t = np.clip(t, 0.0, 1.0)
        s = np.where(t_lo, np.clip(-c / a, 0.0, 1.0), s)
        s = np.where(t_hi, np.clip((b - c) / a, 0.0, 1.0), s)

    # classification from the final clamped values; clamps land exactly on
    # 0.0 / 1.0 so endpoint features are picked up by inclusive compares
    feat_a = np.where(s <= 0.0, 0, np.where(s >= 1.0, 1, 2))
    feat_b = np.where(t <= 0.0, 0, np.where(t >= 1.0, 1, 2))
    region = 3 * feat_a + feat_b

    pa = a0 + s[:, None] * da
    pb = b0 + t[:, None] * db
    diff = pa - pb
    return _dot(diff, diff), region.astype(np.int64), s, t


def ee_mollifier(a0, a1, b0, b1, eps_x=None):
    """Near-parallel edge-edge mollifier in [0, 1], batched.

    c = |（a1-a0) x (b1-b0)|^2; returns 1 for c >= eps_x, else the C1 ramp
    (c/eps_x) (2 - c/eps_x). When eps_x is None it is derived from the
    current edge lengths (callers with rest geometry pass rest-derived
    values so the threshold is constant per pair).
    """
    a0, a1, b0, b1 = np.atleast_2d(a0, a1, b0, b1)
    da = a1 - a0
    db = b1 - b0
    cr = np.cross(da, db)
    c = _dot(cr, cr)
    if eps_x is None:
        eps_x = DEFAULT_MOLLIFIER_SCALE * _dot(da, da) * _dot(db, db)
    eps_x = np.broadcast_to(np.asarray(eps_x, dtype=float), c.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(eps_x > 0, c / eps_x, 1.0)
    return np.where(ratio >= 1.0, 1.0, ratio * (2.0 - ratio))


def edge_edge_distance_sq(a0, a1, b0, b1, eps_x=None) -> DistanceResult:
    """Exact squared distance between closed segments, with mollifier."""
    a0a, a1a, b0a, b1a = (np.asarray(v, dtype=float) for v in (a0, a1, b0, b1))
    if np.linalg.norm(a1a - a0a) == 0.0 or np.linalg.norm(b1a - b0a) == 0.0:
        raise ValueError("zero-length edge in edge_edge_distance_sq")
    d2, region, _, _ = edge_edge_closest(a0a, a1a, b0a, b1a)
    mol = ee_mollifier(a0a, a1a, b0a, b1a, eps_x)
    return DistanceResult(float(d2[0]), EERegion(int(region[0])), float(mol[0]))


# ---------------------------------------------------------------------------
# derivatives of d^2 with respect to the four stacked points
#
# In the active region the closest points are affine combinations of a
# subset of the four points with free parameters w (0 to 2 of them):
#     r(z, w) = sum_i gamma_i(w) z_i,   d^2 = |r|^2 at the region minimizer.
# gamma is affine in w, so with S = d r / d w (constant in w):
#     grad_z d^2   = 2 gamma_i r            (envelope theorem)
#     hess_z d^2   = f_zz - F fww^{-1} F^T   (Schur complement through w*)
# where f_zz = 2 (gamma gamma^T) kron I3, fww = 2 S^T S, and
# F[(i),(m)] = 2 (D_im r + gamma_i s_m) with D = d gamma / d w.

# D tables: (region, point, w-slot). Unused w-slots stay zero and are
# padded with identity in fww so the Schur term ignores them.
_D_PT = np.zeros((7, 4, 2))
_D_PT[PTRegion.EDGE01, :, 0] = (0, 1, -1, 0)
_D_PT[PTRegion.EDGE12, :, 0] = (0, 0, 1, -1)
_D_PT[PTRegion.EDGE20, :, 0] = (0, -1, 0, 1)
_D_PT[PTRegion.INTERIOR, :, 0] = (0, 1, -1, 0)
_D_PT[PTRegion.INTERIOR, :, 1] = (0, 1, 0, -1)

_D_EE = np.zeros((9, 4, 2))
_DS = np.array([-1.0, 1.0, 0.0, 0.0])
_DT = np.array([0.0, 0.0, 1.0, -1.0])
for _sa in range(3):
    for _sb in range(3):
        _reg = 3 * _sa + _sb
        _col = 0
        if _sa == 2:
            _D_EE[_reg, :, _col] = _DS
            _col += 1
        if _sb == 2:
            _D_EE[_reg, :, _col] = _DT


def _gamma_pt(bary):
    n = len(bary)
    g = np.empty((n, 4))
    g[:, 0] = 1.0
    g[:, 1:] = -bary
    return g


def _gamma_ee(s, t):
    n = len(s)
    g = np.empty((n, 4))
    g[:, 0] = 1.0 - s
    g[:, 1] = s
    g[:, 2] = -(1.0 - t)
    g[:, 3] = -t
    return g


def pair_distance_gradients(kind: str, z: np.ndarray):
    """Batched d^2, gradient (N, 12) and Hessian (N, 12, 12) in point coords.

    kind is "vf" (z rows: vertex, t0, t1, t2) or "ee" (a0, a1, b0, b1).
    Also returns (region, gamma) so callers can reuse the closest-point
    combination (friction needs the frozen coefficients).
    """
    z = np.asarray(z, dtype=float)
    n = len(z)
    if kind == "vf":
        d2, region, bary = point_triangle_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
        gamma = _gamma_pt(bary)
        D = _D_PT[region]
    elif kind == "ee":
        d2, region, s, t = edge_edge_closest(z[:, 0], z[:, 1], z[:, 2], z[:, 3])
        gamma = _gamma_ee(s, t)
        D = _D_EE[region]
    else:
        raise ValueError(f"unknown pair kind {kind!r}")

    r = np.einsum("ni,nik->nk", gamma, z)
    grad = (2.0 * gamma[:, :, None] * r[:, None, :]).reshape(n, 12)

    S = np.einsum("nim,nik->nkm", D, z)          # (N, 3, 2)
    fww = 2.0 * np.einsum("nkm,nkl->nml", S, S)  # (N, 2, 2)
    used = np.any(D != 0.0, axis=1)              # (N, 2)
    pad = np.where(used, 0.0, 1.0)
    fww[:, 0, 0] += pad[:, 0]
    fww[:, 1, 1] += pad[:, 1]

    det = fww[:, 0, 0] * fww[:, 1, 1] - fww[:, 0, 1] * fww[:, 1, 0]
    inv = np.empty_like(fww)
    inv[:, 0, 0] = fww[:, 1, 1]
    inv[:, 1, 1] = fww[:, 0, 0]
    inv[:, 0, 1] = -fww[:, 0, 1]
    inv[:, 1, 0] = -fww[:, 1, 0]
    inv /= det[:, None, None]

    # F[(i,k),(m)] = 2 (D_im r_k + gamma_i S_km)
    F = 2.0 * (
        D[:, :, None, :] * r[:, None, :, None]
        + gamma[:, :, None, None] * S[:, None, :, :]
    ).reshape(n, 12, 2)

    gg = np.einsum("ni,nj->nij", gamma, gamma)
    eye3 = np.eye(3)
    fzz = 2.0 * np.einsum("nij,kl->nikjl", gg, eye3).reshape(n, 12, 12)
    hess = fzz - np.einsum("nam,nml,nbl->nab", F, inv, F)
    return d2, grad, hess, region, gamma


def ee_mollifier_grad_hess(z: np.ndarray, eps_x: np.ndarray):
    """Mollifier value, (N, 12) gradient and (N, 12, 12) Hessian.

    z rows are (a0, a1, b0, b1). Outside the activation window the value
    is 1 with zero derivatives (the ramp is C1 at the threshold).
    """
    z = np.asarray(z, dtype=float)
    n = len(z)
    u = z[:, 1] - z[:, 0]
    v = z[:, 3] - z[:, 2]
    cr = np.cross(u, v)
    c = _dot(cr, cr)
    eps_x = np.broadcast_to(np.asarray(eps_x, dtype=float), c.shape)

    uu = _dot(u, u)
    vv = _dot(v, v)
    uv = _dot(u, v)
    dcdu = 2.0 * (vv[:, None] * u - uv[:, None] * v)
    dcdv = 2.0 * (uu[:, None] * v - uv[:, None] * u)

    eye3 = np.eye(3)
    d2c_uu = 2.0 * (vv[:, None, None] * eye3 - np.einsum("ni,nj->nij", v, v))
    d2c_vv = 2.0 * (uu[:, None, None] * eye3 - np.einsum("ni,nj->nij", u, u))
    d2c_uv = (
        4.0 * np.einsum("ni,nj->nij", u, v)
        - 2.0 * np.einsum("ni,nj->nij", v, u)
        - 2.0 * uv[:, None, None] * eye3
    )

    # chain through u = z1 - z0, v = z3 - z2
    sign = np.array([-1.0, 1.0, -1.0, 1.0])
    which = np.array([0, 0, 1, 1])  # 0 -> u, 1 -> v
    grad_c = np.zeros((n, 4, 3))
    grad_c[:, 0] = -dcdu
    grad_c[:, 1] = dcdu
    grad_c[:, 2] = -dcdv
    grad_c[:, 3] = dcdv
    grad_c = grad_c.reshape(n, 12)

    blocks = [[d2c_uu, d2c_uv], [np.swapaxes(d2c_uv, 1, 2), d2c_vv]]
    hess_c = np.zeros((n, 12, 12))
    for i in range(4):
        for j in range(4):
            blk = blocks[which[i]][which[j]]
            hess_c[:, 3 * i : 3 * i + 3, 3 * j : 3 * j + 3] = (
                sign[i] * sign[j] * blk
            )

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(eps_x > 0, c / eps_x, 1.0)
    active = ratio < 1.0
    val = np.where(active, ratio * (2.0 - ratio), 1.0)
    e1 = np.where(active, 2.0 / eps_x * (1.0 - ratio), 0.0)  # de/dc
    e2 = np.where(active, -2.0 / (eps_x * eps_x), 0.0)       # d2e/dc2

    grad = e1[:, None] * grad_c
    hess = e2[:, None, None] * np.einsum(
        "na,nb->nab", grad_c, grad_c
    ) + e1[:, None, None] * hess_c
    return val, grad, hess
