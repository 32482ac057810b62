"""Implicit-Euler time stepping by projected-Newton minimization.

Each step minimizes, over the dynamic coordinates,

    E(q) = sum_b [ 1/2 |q_b - q_tilde_b|_M^2 + dt^2 V_ortho(q_b) ]
           + V_contact(q) + V_friction(q)

with q_tilde_b = q_b + dt qdot_b + dt^2 M^{-1} f_b. Contact and friction
enter unscaled, with the barrier stiffness carrying the overall scale.
Every Newton iterate refreshes the candidate set over the proposed
interval, shares it between barrier evaluation and CCD, and caps the line
search at a conservative fraction of the certified time of impact, so
accepted iterates are intersection-free by construction.
"""
from __future__ import annotations

import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .body import (
    BodyMaterial,
    GeneralizedMass,
    ortho_energy,
    ortho_error,
    ortho_gradient,
    ortho_hessian,
    project_psd,
)
from .ccd import step_filter
from .contact import (
    CandidateSet,
    CollisionBody,
    FrictionData,
    PairBlocks,
    broad_phase,
    candidate_min_distance_sq,
    contact_energy,
    contact_gradient_hessian,
    friction_energy,
    friction_gradient_hessian,
    friction_precompute,
    world_positions_all,
)
from .constraints import Reduction
from .distance import edge_edge_closest, point_triangle_closest
from .sparse import BlockSparseMatrix

__all__ = [
    "StepParams",
    "SystemModel",
    "SimState",
    "StepStats",
    "StepFailure",
    "IncrementalPotentialState",
    "compute_q_tilde",
    "ip_value",
    "assemble",
    "solve_newton_system",
    "line_search",
    "advance_step",
    "global_min_distance",
]


class StepFailure(RuntimeError):
    """Line search underflow; carries diagnostics of the failing state."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class StepParams:
    """Time-step controls; lengths are in normalized scene units."""

    dt: float
    d_hat: float = 1e-3
    kappa_barrier: float = 1e4
    mu: float = 0.0
    epsilon_v: float = 1e-3
    newton_tol: float = 1e-2
    max_newton_iters: int = 64
    friction_outer_iters: int = 1
    ccd_slack: float = 0.1
    ccd_step_scale: float = 0.9
    workers: int = 1
    audit_iterates: bool = False

    def __post_init__(self):
        if self.dt <= 0 or self.d_hat <= 0 or self.newton_tol <= 0:
            raise ValueError("dt, d_hat and newton_tol must be positive")
        if self.mu < 0:
            raise ValueError("friction coefficient must be >= 0")


@dataclass
class SystemModel:
    """Immutable scene description consumed by the stepper.

    force_fn(step_index, t_next, q_all) returns per-body external
    generalized forces evaluated at the end-of-step time (kinematic rows
    ignored). reduction is None when no joints are present.
    """

    bodies: list[CollisionBody]
    gmass: list[GeneralizedMass | None]
    materials: list[BodyMaterial | None]
    force_fn: object = None
    reduction: Reduction | None = None

    def __post_init__(self):
        self.dynamic = np.array([b.dynamic for b in self.bodies], dtype=bool)
        self.dyn_indices = np.nonzero(self.dynamic)[0]
        self.n_dyn = len(self.dyn_indices)
        self.slot_of = {int(b): s for s, b in enumerate(self.dyn_indices)}
        for b in self.dyn_indices:
            if self.gmass[b] is None or self.materials[b] is None:
                raise ValueError(f"dynamic body {b} missing mass or material")

    def forces(self, step_index, t_next, q_all) -> np.ndarray:
        if self.force_fn is None:
            return np.zeros((len(self.bodies), 12))
        return np.asarray(self.force_fn(step_index, t_next, q_all), dtype=float)


@dataclass
class SimState:
    """Mutable kinematic state between steps."""

    q: np.ndarray       # (B, 12)
    q_dot: np.ndarray   # (B, 12)
    time: float = 0.0
    step_index: int = 0
    u: np.ndarray | None = None       # reduced unknowns (constrained scenes)
    u_dot: np.ndarray | None = None

    def copy(self) -> "SimState":
        return SimState(
            self.q.copy(), self.q_dot.copy(), self.time, self.step_index,
            None if self.u is None else self.u.copy(),
            None if self.u_dot is None else self.u_dot.copy(),
        )


@dataclass
class IncrementalPotentialState:
    """Per-step data the energy and its derivatives close over."""

    q_prev: np.ndarray
    q_dot_prev: np.ndarray
    q_tilde: np.ndarray            # (B, 12); kinematic rows equal q_prev
    friction: FrictionData
    candidates: CandidateSet
    model: SystemModel


@dataclass
class StepStats:
    step: int
    iterations: int
    converged: bool
    min_distance: float
    candidates: int
    ip_value: float
    max_ortho_error: float
    energy_trace: list = field(default_factory=list)
    min_iterate_distance: float = np.inf
    timings: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------


def compute_q_tilde(model: SystemModel, state: SimState, params: StepParams,
                    forces: np.ndarray) -> np.ndarray:
    """Inertial target q + dt qdot + dt^2 M^{-1} f per dynamic body."""
    q_tilde = state.q.copy()
    for b in model.dyn_indices:
        M = model.gmass[b].matrix
        q_tilde[b] = (
            state.q[b]
            + params.dt * state.q_dot[b]
            + params.dt**2 * np.linalg.solve(M, forces[b])
        )
    return q_tilde


def ip_value(q_all, ip: IncrementalPotentialState, params: StepParams) -> float:
    """Incremental potential at q_all (inertia + stiffening + contact + friction)."""
    model = ip.model
    total = 0.0
    for b in model.dyn_indices:
        diff = q_all[b] - ip.q_tilde[b]
        total += 0.5 * float(diff @ model.gmass[b].matrix @ diff)
        total += params.dt**2 * ortho_energy(q_all[b], model.materials[b])
    total += contact_energy(
        model.bodies, q_all, ip.candidates, params.kappa_barrier, params.d_hat
    )
    total += friction_energy(q_all, ip.friction, params.dt, params.epsilon_v)
    return total


def _chunk_rows(n, workers):
    workers = max(1, int(workers))
    if n == 0:
        return []
    bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _pass1_local_blocks(model, q_all, candidates, friction, params) -> PairBlocks:
    """Pass 1: per-pair local gradients/Hessians, cached in canonical order.

    Work splits into contiguous chunks across a thread pool; per-pair
    results are independent of the chunking, and chunk-order concatenation
    reproduces the single-worker ordering exactly.
    """
    tasks = []
    for kind, rows in (("vf", candidates.vf), ("ee", candidates.ee)):
        for sl in _chunk_rows(len(rows), params.workers):
            subset = CandidateSet(
                vf=rows[sl] if kind == "vf" else np.zeros((0, 4), dtype=np.int64),
                ee=rows[sl] if kind == "ee" else np.zeros((0, 4), dtype=np.int64),
            )
            tasks.append(("contact", subset))
    for sl in _chunk_rows(len(friction), params.workers):
        sub = FrictionData(
            friction.body_a[sl], friction.body_b[sl], friction.lam[sl],
            friction.mu, friction.tangent_map[sl], friction.offset[sl],
            friction.basis[sl],
        )
        tasks.append(("friction", sub))

    def run(task):
        kind, payload = task
        if kind == "contact":
            return contact_gradient_hessian(
                model.bodies, q_all, payload, params.kappa_barrier, params.d_hat
            )
        return friction_gradient_hessian(
            q_all, payload, params.dt, params.epsilon_v, model.dynamic
        )

    if params.workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=params.workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    return [r for r in results if len(r.body_a)]


def assemble(q_all, ip: IncrementalPotentialState, params: StepParams,
             timings: dict | None = None):
    """Gradient and block-sparse Hessian of the incremental potential.

    Two passes: local per-pair blocks computed (optionally in parallel)
    and cached, then accumulated in canonical order into a pattern
    preallocated from the culling overlaps, so the result is bitwise
    independent of the worker count.
    """
    model = ip.model
    n = model.n_dyn
    grad = np.zeros((n, 12))

    pattern = set()
    sources = [ip.candidates.overlap_pairs]
    if len(ip.friction):
        sources.append(
            np.stack([ip.friction.body_a, ip.friction.body_b], axis=1)
        )
    for arr in sources:
        for i, j in arr:
            if model.dynamic[i] and model.dynamic[j]:
                si, sj = model.slot_of[int(i)], model.slot_of[int(j)]
                pattern.add((min(si, sj), max(si, sj)))
    H = BlockSparseMatrix(n, sorted(pattern))

    # inertial + stiffening diagonal terms; the per-body stiffening
    # Hessians are PSD-projected in one batched eigendecomposition
    ortho_blocks = np.empty((n, 12, 12))
    for b in model.dyn_indices:
        s = model.slot_of[int(b)]
        M = model.gmass[b].matrix
        grad[s] += M @ (q_all[b] - ip.q_tilde[b])
        grad[s] += params.dt**2 * ortho_gradient(q_all[b], model.materials[b])
        H.add_diag(s, M)
        ortho_blocks[s] = ortho_hessian(q_all[b], model.materials[b])
    if n:
        projected = params.dt**2 * project_psd(ortho_blocks)
        for s in range(n):
            H.add_diag(s, projected[s])

    tic = time.perf_counter()
    parts = _pass1_local_blocks(model, q_all, ip.candidates, ip.friction, params)
    if timings is not None:
        timings["narrow_phase"] += time.perf_counter() - tic
    # pass 2: accumulation part by part in cached (canonical) order;
    # np.add.at applies per-pair contributions in index order, bitwise
    # matching a sequential loop over the same ordering
    slot_lookup = np.full(len(model.bodies), -1, dtype=np.int64)
    for b, s in model.slot_of.items():
        slot_lookup[b] = s
    off_keys = sorted(H.off.keys())
    key_index = {k: i for i, k in enumerate(off_keys)}
    off_stack = np.zeros((len(off_keys), 12, 12))
    for blocks in parts:
        m = len(blocks.body_a)
        sa = slot_lookup[blocks.body_a]
        sb = slot_lookup[blocks.body_b]
        # interleave A/B sides pair-major so the addition order into any
        # slot matches a pair-by-pair sequential loop, independent of how
        # pass 1 was chunked
        slots2 = np.empty(2 * m, dtype=np.int64)
        slots2[0::2], slots2[1::2] = sa, sb
        gvals = np.empty((2 * m, 12))
        gvals[0::2], gvals[1::2] = blocks.grad[:, :12], blocks.grad[:, 12:]
        hvals = np.empty((2 * m, 12, 12))
        hvals[0::2] = blocks.hess[:, :12, :12]
        hvals[1::2] = blocks.hess[:, 12:, 12:]
        live = slots2 >= 0
        if live.any():
            np.add.at(grad, slots2[live], gvals[live])
            np.add.at(H.diag, slots2[live], hvals[live])
        both = (sa >= 0) & (sb >= 0)
        if both.any():
            lo = np.minimum(sa[both], sb[both])
            hi = np.maximum(sa[both], sb[both])
            idx = np.array([key_index[(int(i), int(j))] for i, j in zip(lo, hi)])
            upper = np.where(
                (sa[both] < sb[both])[:, None, None],
                blocks.hess[both, :12, 12:],
                np.swapaxes(blocks.hess[both, :12, 12:], 1, 2),
            )
            np.add.at(off_stack, idx, upper)
    for k, key in enumerate(off_keys):
        H.off[key] += off_stack[k]
    return grad.reshape(-1), H


def solve_newton_system(hessian: BlockSparseMatrix, gradient: np.ndarray) -> np.ndarray:
    """Solve H dq = -g via block Cholesky with refinement to 1e-8 relative."""
    factor = hessian.factor()
    return factor.solve_refined(-np.asarray(gradient, dtype=float), rel_tol=1e-8)


def _expand_delta(model: SystemModel, delta_dyn: np.ndarray) -> np.ndarray:
    """Scatter a stacked dynamic update into full per-body rows."""
    out = np.zeros((len(model.bodies), 12))
    out[model.dyn_indices] = delta_dyn.reshape(model.n_dyn, 12)
    return out


def line_search(q_all, delta_q, ip: IncrementalPotentialState,
                params: StepParams, e0: float | None = None,
                timings: dict | None = None):
    """Backtracking line search capped by the certified CCD fraction.

    delta_q is a full (B, 12) direction with zero kinematic rows. Returns
    (alpha, new energy). When CCD certifies less than the full step, alpha
    starts at ccd_step_scale times the certified fraction (strictly inside
    the certified interval); a fully certified step starts at 1. Either
    way the accepted configuration is intersection-free.
    """
    model = ip.model
    tic = time.perf_counter()
    alpha_max = step_filter(
        model.bodies, q_all, delta_q, ip.candidates, slack=params.ccd_slack
    )
    if timings is not None:
        timings["ccd"] += time.perf_counter() - tic
    alpha = 1.0 if alpha_max >= 1.0 else min(1.0, params.ccd_step_scale * alpha_max)
    if e0 is None:
        e0 = ip_value(q_all, ip, params)
    while True:
        trial = q_all + alpha * delta_q
        e = ip_value(trial, ip, params)
        if e < e0:
            return alpha, e
        alpha *= 0.5
        if alpha < 1e-12:
            raise StepFailure(
                "line search underflow (no descent below alpha = 1e-12)",
                diagnostics={
                    "e0": e0,
                    "candidates": len(ip.candidates),
                    "alpha_max": alpha_max,
                },
            )


def global_min_distance(bodies, q_all, skip_static_pairs=True) -> float:
    """Exact minimum inter-body distance (vertex-face and edge-edge).

    Body pairs are pruned by bounding-box gaps in ascending order, so only
    near pairs pay for exact primitive evaluation. Pairs of two kinematic
    bodies are skipped by default (static geometry may touch by design).
    """
    X = world_positions_all(bodies, q_all)
    n = len(bodies)
    los = [x.min(axis=0) for x in X]
    his = [x.max(axis=0) for x in X]
    gaps = []
    for i in range(n):
        for j in range(i + 1, n):
            if skip_static_pairs and not (bodies[i].dynamic or bodies[j].dynamic):
                continue
            g = np.maximum(0.0, np.maximum(los[i] - his[j], los[j] - his[i]))
            gaps.append((float(np.linalg.norm(g)), i, j))
    gaps.sort()
    best = np.inf
    for gap, i, j in gaps:
        if gap >= best:
            break
        best = min(best, _body_pair_min_distance(bodies[i], bodies[j], X[i], X[j], best))
    return best


def _body_pair_min_distance(body_a, body_b, Xa, Xb, best):
    for (V, bt, Xv, Xt) in (
        (Xa, body_b.triangles, Xa, Xb),
        (Xb, body_a.triangles, Xb, Xa),
    ):
        tv = Xt[bt]
        tlo = tv.min(axis=1)
        thi = tv.max(axis=1)
        # prune vertex-triangle pairs by box gap
        for start in range(0, len(Xv), 4096):
            Vc = Xv[start : start + 4096]
            gap = np.maximum(
                0.0,
                np.maximum(
                    Vc[:, None, :] - thi[None, :, :], tlo[None, :, :] - Vc[:, None, :]
                ),
            )
            g2 = np.einsum("nmk,nmk->nm", gap, gap)
            ii, jj = np.nonzero(g2 < best * best)
            if len(ii) == 0:
                continue
            d2, _, _ = point_triangle_closest(
                Vc[ii], tv[jj, 0], tv[jj, 1], tv[jj, 2]
            )
            if len(d2):
                best = min(best, float(np.sqrt(d2.min())))
    ea, eb = body_a.edges, body_b.edges
    Ea = Xa[ea]  # (Na, 2, 3)
    Eb = Xb[eb]
    alo, ahi = Ea.min(axis=1), Ea.max(axis=1)
    blo, bhi = Eb.min(axis=1), Eb.max(axis=1)
    for start in range(0, len(Ea), 2048):
        sl = slice(start, start + 2048)
        gap = np.maximum(
            0.0,
            np.maximum(
                alo[sl][:, None, :] - bhi[None, :, :],
                blo[None, :, :] - ahi[sl][:, None, :],
            ),
        )
        g2 = np.einsum("nmk,nmk->nm", gap, gap)
        ii, jj = np.nonzero(g2 < best * best)
        if len(ii) == 0:
            continue
        Easl = Ea[sl]
        d2, _, _, _ = edge_edge_closest(
            Easl[ii, 0], Easl[ii, 1], Eb[jj, 0], Eb[jj, 1]
        )
        if len(d2):
            best = min(best, float(np.sqrt(d2.min())))
    return best


# ---------------------------------------------------------------------------


def _solve_direction(model, grad, H, reduction: Reduction | None):
    """Newton direction over dynamic coordinates, through the reduction if
    joints are present (conjugation H_u = T^T H T on the dense form)."""
    if reduction is None:
        return solve_newton_system(H, grad)
    T = reduction.T
    Hd = H.to_dense()
    Hu = T.T @ Hd @ T
    gu = T.T @ grad
    L = np.linalg.cholesky(0.5 * (Hu + Hu.T))
    du = np.linalg.solve(L.T, np.linalg.solve(L, -gu))
    return T @ du


def advance_step(model: SystemModel, state: SimState, params: StepParams):
    """One implicit-Euler step; returns (new_state, StepStats).

    Non-convergence inside the iteration budget completes the step with a
    warning (the iterate is still intersection-free); a failed line search
    raises StepFailure.
    """
    t0 = time.perf_counter()
    timings = dict.fromkeys(
        ("broad_phase", "narrow_phase", "assembly", "solve", "ccd",
         "line_search"), 0.0)
    q0 = state.q.copy()
    t_next = state.time + params.dt
    forces = model.forces(state.step_index, t_next, q0)
    q_tilde = compute_q_tilde(model, state, params, forces)

    tic = time.perf_counter()
    cands = broad_phase(model.bodies, q0, q0, params.d_hat)
    timings["broad_phase"] += time.perf_counter() - tic
    friction = friction_precompute(
        model.bodies, q0, cands, params.kappa_barrier, params.d_hat, params.mu
    )

    q = q0.copy()
    iterations = 0
    converged = False
    energy_trace = []
    min_iter_dist = np.inf
    max_candidates = len(cands)

    for outer in range(max(1, params.friction_outer_iters)):
        if outer > 0:
            tic = time.perf_counter()
            cands = broad_phase(model.bodies, q, q, params.d_hat)
            timings["broad_phase"] += time.perf_counter() - tic
            friction = friction_precompute(
                model.bodies, q, cands, params.kappa_barrier,
                params.d_hat, params.mu,
            )
        ip = IncrementalPotentialState(q0, state.q_dot.copy(), q_tilde,
                                       friction, cands, model)
        converged = False
        for _ in range(params.max_newton_iters):
            tic = time.perf_counter()
            narrow_before = timings["narrow_phase"]
            grad, H = assemble(q, ip, params, timings)
            timings["assembly"] += (
                time.perf_counter() - tic - (timings["narrow_phase"] - narrow_before)
            )

            tic = time.perf_counter()
            delta_dyn = _solve_direction(model, grad, H, model.reduction)
            timings["solve"] += time.perf_counter() - tic

            if np.abs(delta_dyn).max() / params.dt < params.newton_tol:
                converged = True
                break

            if float(grad @ delta_dyn) >= 0.0:
                warnings.warn(
                    "projected system produced a non-descent direction; "
                    "falling back to steepest descent",
                    RuntimeWarning,
                )
                if model.reduction is None:
                    delta_dyn = -grad
                else:
                    T = model.reduction.T
                    delta_dyn = T @ (T.T @ (-grad))

            delta_q = _expand_delta(model, delta_dyn)
            tic = time.perf_counter()
            ip.candidates = broad_phase(
                model.bodies, q, q + delta_q, params.d_hat
            )
            timings["broad_phase"] += time.perf_counter() - tic
            max_candidates = max(max_candidates, len(ip.candidates))

            tic = time.perf_counter()
            alpha, e_new = line_search(q, delta_q, ip, params, timings=timings)
            timings["line_search"] += time.perf_counter() - tic
            q = q + alpha * delta_q
            energy_trace.append(e_new)
            iterations += 1
            if params.audit_iterates:
                min_iter_dist = min(
                    min_iter_dist, global_min_distance(model.bodies, q)
                )
        if not converged:
            warnings.warn(
                f"step {state.step_index}: Newton did not converge in "
                f"{params.max_newton_iters} iterations "
                f"(|dq|/dt = {np.abs(delta_dyn).max() / params.dt:.3e})",
                RuntimeWarning,
            )

    new_state = state.copy()
    new_state.q = q
    new_state.q_dot = np.zeros_like(state.q_dot)
    new_state.q_dot[model.dyn_indices] = (
        q[model.dyn_indices] - q0[model.dyn_indices]
    ) / params.dt
    if model.reduction is not None:
        dyn_q = q[model.dyn_indices].reshape(-1)
        new_state.u = model.reduction.extract_u(dyn_q)
        new_state.u_dot = model.reduction.extract_u_rate(
            new_state.q_dot[model.dyn_indices].reshape(-1)
        )
    new_state.time = t_next
    new_state.step_index = state.step_index + 1

    # the final candidate set covers the accepted configuration, so any
    # sub-d_hat minimum found there is the exact global minimum; only the
    # no-near-contact case needs the pruned exhaustive search
    cand_min = candidate_min_distance_sq(model.bodies, q, ip.candidates)
    if cand_min is not None and cand_min < params.d_hat**2:
        min_distance = float(np.sqrt(cand_min))
    else:
        min_distance = global_min_distance(model.bodies, q)

    stats = StepStats(
        step=state.step_index,
        iterations=iterations,
        converged=converged,
        min_distance=min_distance,
        candidates=max_candidates,
        ip_value=ip_value(q, ip, params),
        max_ortho_error=max(
            (ortho_error(q[b]) for b in model.dyn_indices), default=0.0
        ),
        energy_trace=energy_trace,
        min_iterate_distance=min_iter_dist,
        timings=timings,
    )
    stats.timings["total"] = time.perf_counter() - t0
    return new_state, stats
