"""Scene configuration, mesh I/O, the simulation driver, and the audit.

Scene files are JSON (schema documented in the README): bodies reference
OBJ meshes and carry density, stiffness and initial placement; joints
expose axis / hinge / fixed-vertices constraints; forces are gravity plus
windowed per-body point loads and torques. On load the whole scene is
uniformly mapped into a unit box (geometry, gravity and velocities scale
with it; stiffnesses and densities are read as normalized-unit values) and
all defaults, d_hat = 1e-3 in particular, live in those units. Frames are
written back de-normalized as OBJ files with one object per body, and a
comma-separated stats table records per-step solver metrics.
"""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import (
    BodyCoords,
    BodyMaterial,
    external_generalized_force,
    mass_matrix,
    torque_point_forces,
)
from .constraints import (
    VirtualTet,
    axis_anchor_rows,
    build_constrained_system,
    constrain_linear,
    make_axis_tet,
)
from .contact import CollisionBody
from .intersect import triangles_intersect_batch
from .mesh import SurfaceMesh
from .solver import SimState, StepParams, SystemModel, advance_step

__all__ = [
    "SceneConfig",
    "SceneState",
    "FrameStats",
    "load_scene",
    "run",
    "audit_intersections",
    "read_obj",
    "write_obj_frame",
    "STATS_HEADER",
]

STATS_HEADER = (
    "step,iterations,converged,min_distance,candidates,ip_value,"
    "max_ortho_error,min_iterate_distance,"
    "t_broad_phase,t_narrow_phase,t_assembly,t_solve,t_ccd,t_line_search,t_total"
)
# columns before the t_* block are deterministic for fixed scene/seed/workers
STATS_DETERMINISTIC_COLUMNS = 8


# ---------------------------------------------------------------------------
# OBJ mesh I/O


def read_obj(path) -> SurfaceMesh:
    """Triangle mesh from an OBJ file (v / f records; polygons rejected)."""
    verts, tris = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0] in ("#", "o", "g", "s", "vn", "vt", "usemtl", "mtllib"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(
                        f"{path}:{line_no}: only triangle faces are supported"
                    )
                tris.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    if not verts or not tris:
        raise ValueError(f"{path}: no triangle geometry found")
    return SurfaceMesh(np.asarray(verts, dtype=float), np.asarray(tris, dtype=np.int64))


def read_obj_objects(path):
    """All `o`-grouped objects of an OBJ file as (name, vertices, triangles).

    Vertex indices are global per OBJ convention; triangles are remapped to
    each object's own vertex array.
    """
    verts = []
    objects = []
    current = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "o":
                current = (parts[1] if len(parts) > 1 else f"object{len(objects)}", [])
                objects.append(current)
            elif parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if current is None:
                    current = ("object0", [])
                    objects.append(current)
                current[1].append(idx)
    verts = np.asarray(verts, dtype=float)
    out = []
    for name, faces in objects:
        faces = np.asarray(faces, dtype=np.int64)
        used = np.unique(faces)
        remap = {int(g): l for l, g in enumerate(used)}
        local = np.vectorize(remap.get)(faces)
        out.append((name, verts[used], local))
    return out


def write_obj_frame(path, names, vertex_arrays, triangle_arrays):
    """One OBJ with an `o` group per body; %.17g keeps round trips exact."""
    lines = []
    offset = 1
    for name, verts, tris in zip(names, vertex_arrays, triangle_arrays):
        lines.append(f"o {name}")
        for v in verts:
            lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
        for t in tris:
            lines.append(f"f {t[0] + offset} {t[1] + offset} {t[2] + offset}")
        offset += len(verts)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# scene configuration


@dataclass
class BodySpec:
    name: str
    mesh_path: str
    density: float = 1000.0
    kappa_ortho: float = 1e11
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(12))
    kinematic: bool = False
    perturb_translation: float = 0.0


@dataclass
class JointSpec:
    kind: str            # axis | hinge | fixed-vertices
    bodies: list
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    size: float | None = None


@dataclass
class ForceSpec:
    body: str
    kind: str            # point | torque
    vector: np.ndarray   # force or torque
    x_bar: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start: float = 0.0
    end: float = np.inf


@dataclass
class OutputConfig:
    frame_interval: int = 1
    directory: str | None = None
    audit: bool = False
    workers: int = 1
    seed: int = 0


@dataclass
class SceneConfig:
    name: str
    gravity: np.ndarray
    bodies: list
    joints: list
    forces: list
    params: dict
    output: OutputConfig

    @classmethod
    def from_file(cls, path) -> "SceneConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid scene JSON: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=Path(".")) -> "SceneConfig":
        if "bodies" not in raw or not raw["bodies"]:
            raise ValueError("scene must declare at least one body")
        bodies = []
        names = set()
        for spec in raw["bodies"]:
            if "name" not in spec or "mesh" not in spec:
                raise ValueError("each body needs 'name' and 'mesh'")
            if spec["name"] in names:
                raise ValueError(f"duplicate body name {spec['name']!r}")
            names.add(spec["name"])
            mesh_path = str(base_dir / spec["mesh"])
            if not Path(mesh_path).exists():
                raise FileNotFoundError(f"mesh file not found: {mesh_path}")
            vel = np.zeros(12)
            if "velocity" in spec:
                v = np.asarray(spec["velocity"], dtype=float)
                if v.shape == (3,):
                    vel[:3] = v
                elif v.shape == (12,):
                    vel = v
                else:
                    raise ValueError(
                        f"body {spec['name']}: velocity must have 3 or 12 entries"
                    )
            bodies.append(
                BodySpec(
                    name=spec["name"],
                    mesh_path=mesh_path,
                    density=float(spec.get("density", 1000.0)),
                    kappa_ortho=float(spec.get("kappa_ortho", 1e11)),
                    translation=np.asarray(spec.get("translation", [0, 0, 0]), dtype=float),
                    linear=np.asarray(
                        spec.get("linear", np.eye(3).tolist()), dtype=float
                    ).reshape(3, 3),
                    velocity=vel,
                    kinematic=bool(spec.get("kinematic", False)),
                    perturb_translation=float(spec.get("perturb_translation", 0.0)),
                )
            )
        joints = []
        for spec in raw.get("joints", []):
            kind = spec.get("type")
            if kind not in ("axis", "hinge", "fixed-vertices"):
                raise ValueError(f"unknown joint type {kind!r}")
            jbodies = spec.get("bodies", [spec.get("body")])
            if any(b not in names for b in jbodies):
                raise ValueError(f"joint references unknown body in {jbodies}")
            if kind == "hinge" and len(jbodies) != 2:
                raise ValueError("hinge joints take exactly two bodies")
            joints.append(
                JointSpec(
                    kind=kind,
                    bodies=list(jbodies),
                    point=np.asarray(spec.get("point", [0, 0, 0]), dtype=float),
                    direction=np.asarray(
                        spec.get("direction", [0, 0, 1]), dtype=float
                    ),
                    size=spec.get("size"),
                )
            )
        forces = []
        for spec in raw.get("forces", []):
            if spec.get("body") not in names:
                raise ValueError(f"force references unknown body {spec.get('body')!r}")
            kind = spec.get("type", "point")
            if kind not in ("point", "torque"):
                raise ValueError(f"unknown force type {kind!r}")
            vec_key = "torque" if kind == "torque" else "force"
            forces.append(
                ForceSpec(
                    body=spec["body"],
                    kind=kind,
                    vector=np.asarray(spec[vec_key], dtype=float),
                    x_bar=np.asarray(spec.get("x_bar", [0, 0, 0]), dtype=float),
                    start=float(spec.get("start", 0.0)),
                    end=float(spec.get("end", np.inf)),
                )
            )
        out_raw = raw.get("output", {})
        output = OutputConfig(
            frame_interval=int(out_raw.get("frame_interval", 1)),
            directory=out_raw.get("directory"),
            audit=bool(out_raw.get("audit", False)),
            workers=int(out_raw.get("workers", 1)),
            seed=int(out_raw.get("seed", 0)),
        )
        return cls(
            name=raw.get("name", "scene"),
            gravity=np.asarray(raw.get("gravity", [0, 0, -9.8]), dtype=float),
            bodies=bodies,
            joints=joints,
            forces=forces,
            params=dict(raw.get("params", {})),
            output=output,
        )


@dataclass
class FrameStats:
    """One stats row; mirrors the CSV columns."""

    step: int
    iterations: int
    converged: bool
    min_distance: float
    candidates: int
    ip_value: float
    max_ortho_error: float
    min_iterate_distance: float
    timings: dict

    def csv_row(self) -> str:
        t = self.timings
        cols = [
            str(self.step),
            str(self.iterations),
            "1" if self.converged else "0",
            f"{self.min_distance:.17g}",
            str(self.candidates),
            f"{self.ip_value:.17g}",
            f"{self.max_ortho_error:.17g}",
            f"{self.min_iterate_distance:.17g}",
        ] + [
            f"{t.get(k, 0.0):.6f}"
            for k in ("broad_phase", "narrow_phase", "assembly", "solve",
                      "ccd", "line_search", "total")
        ]
        return ",".join(cols)


@dataclass
class SceneState:
    """A loaded scene: model + state + the normalization mapping."""

    config: SceneConfig
    model: SystemModel
    state: SimState
    params: StepParams
    names: list
    meshes: list            # normalized rest meshes
    scale: float
    origin: np.ndarray
    scene_diameter: float

    def world_vertices(self, denormalize=True):
        out = []
        for mesh, q in zip(self.meshes, self.state.q):
            A = q[3:].reshape(3, 3)
            world = mesh.vertices @ A.T + q[:3]
            if denormalize:
                world = world / self.scale + self.origin
            out.append(world)
        return out


# ---------------------------------------------------------------------------
# loading


def _initial_world(mesh, spec):
    return mesh.vertices @ spec.linear.T + spec.translation


def _reorigin(mesh, p, A, vel, shift):
    """Move the body-frame origin by `shift` without changing world motion."""
    verts = mesh.vertices - shift
    new_mesh = SurfaceMesh(verts, mesh.triangles)
    p_new = p + A @ shift
    vel = vel.copy()
    vel[:3] = vel[:3] + vel[3:].reshape(3, 3) @ shift
    return new_mesh, p_new, vel


def load_scene(path_or_config) -> SceneState:
    """Load, normalize, precompute masses/constraints, verify no overlap."""
    if isinstance(path_or_config, SceneConfig):
        config = path_or_config
    else:
        config = SceneConfig.from_file(path_or_config)

    rng = np.random.default_rng(config.output.seed)
    raw_meshes = [read_obj(spec.mesh_path) for spec in config.bodies]
    translations = []
    for spec in config.bodies:
        t = spec.translation.copy()
        if spec.perturb_translation > 0.0:
            t = t + spec.perturb_translation * rng.uniform(-1.0, 1.0, 3)
        translations.append(t)

    # scene normalization: uniform scale into a unit box
    los, his = [], []
    for mesh, spec, t in zip(raw_meshes, config.bodies, translations):
        world = mesh.vertices @ spec.linear.T + t
        los.append(world.min(axis=0))
        his.append(world.max(axis=0))
    lo = np.min(los, axis=0)
    hi = np.max(his, axis=0)
    extent = float((hi - lo).max())
    scale = 1.0 / extent if extent > 0 else 1.0
    origin = lo

    meshes = []
    states_q = []
    states_qdot = []
    for mesh, spec, t in zip(raw_meshes, config.bodies, translations):
        verts_n = mesh.vertices * scale
        meshes.append(SurfaceMesh(verts_n, mesh.triangles))
        # x = A x_bar + t maps to x_n = A (s x_bar) + s (t - lo)
        p_n = (t - origin) * scale
        dev = np.linalg.norm(spec.linear @ spec.linear.T - np.eye(3))
        if dev > 1e-6:
            warnings.warn(
                f"body {spec.name!r}: initial linear transform deviates from "
                f"orthogonality by {dev:.2e}",
                UserWarning,
            )
        q = BodyCoords.from_parts(p_n, spec.linear).q
        states_q.append(q)
        qdot = spec.velocity.copy()
        qdot[:3] *= scale
        states_qdot.append(qdot)

    # joints may require the body-frame origin off the axis line
    tets: dict[int, VirtualTet] = {}
    anchor_rows = []
    name_to_index = {spec.name: i for i, spec in enumerate(config.bodies)}
    origin_shifts = [np.zeros(3) for _ in config.bodies]

    def body_frame_axis(b, joint):
        q = states_q[b]
        A = q[3:].reshape(3, 3)
        p = q[:3]
        point_n = (joint.point - origin) * scale
        a_body = np.linalg.solve(A, point_n - p)
        d_body = np.linalg.solve(A, joint.direction)
        d_body /= np.linalg.norm(d_body)
        return a_body, d_body

    def tet_size_for(b, joint):
        if joint.size is not None:
            return float(joint.size) * scale
        r = np.linalg.norm(
            meshes[b].vertices - meshes[b].vertices.mean(axis=0), axis=1
        ).max()
        return max(0.25 * r, 1e-3)

    def ensure_off_axis(b, joint, size):
        """Shift the rest origin sideways when the axis runs through it
        (a centered proxy tet cannot have an edge through its centroid)."""
        a_body, d_body = body_frame_axis(b, joint)
        c0 = a_body - (a_body @ d_body) * d_body
        if np.linalg.norm(c0) >= 0.1 * size:
            return a_body, d_body
        helper = np.eye(3)[int(np.argmin(np.abs(d_body)))]
        shift = np.cross(d_body, helper)
        shift *= 0.5 * size / np.linalg.norm(shift)
        q = states_q[b]
        mesh2, p_new, vel2 = _reorigin(
            meshes[b], q[:3], q[3:].reshape(3, 3), states_qdot[b], shift
        )
        meshes[b] = mesh2
        states_q[b] = BodyCoords.from_parts(p_new, q[3:].reshape(3, 3)).q
        states_qdot[b] = vel2
        origin_shifts[b] = origin_shifts[b] + shift
        return body_frame_axis(b, joint)

    # hinges claim proxy tets first; axis joints on claimed bodies fall back
    # to anchor rows through the existing proxy
    for joint in config.joints:
        if joint.kind != "hinge":
            continue
        ia, ib = (name_to_index[n] for n in joint.bodies)
        for b in (ia, ib):
            if b in tets:
                raise ValueError(
                    f"body {config.bodies[b].name!r} already carries a proxy "
                    "tet; chain joints need explicit anchor rows"
                )
            if config.bodies[b].kinematic:
                raise ValueError("hinge joints require dynamic bodies")
        size = min(tet_size_for(ia, joint), tet_size_for(ib, joint))
        pa, da = ensure_off_axis(ia, joint, size)
        tets[ia] = make_axis_tet(pa, da, size=size, fix_edge=False)
        pb, db = ensure_off_axis(ib, joint, size)
        tet_b = make_axis_tet(pb, db, size=size, fix_edge=False)
        tets[ib] = VirtualTet(
            tet_b.rest_vertices,
            tet_b.fixed_dof_mask,
            shared_vertex_links=((1, ia, 1), (3, ia, 3)),
        )

    for joint in config.joints:
        if joint.kind == "hinge":
            continue
        b = name_to_index[joint.bodies[0]]
        if config.bodies[b].kinematic:
            raise ValueError(f"{joint.kind} joint requires a dynamic body")
        size = tet_size_for(b, joint)
        if b in tets:
            # proxy already claimed (hinge): anchor through equality rows
            a_body, d_body = body_frame_axis(b, joint)
            anchor_rows.append((b, a_body, d_body, size))
            continue
        a_body, d_body = ensure_off_axis(b, joint, size)
        tets[b] = make_axis_tet(a_body, d_body, size=size, fix_edge=True)

    # masses and materials on the final (possibly re-originned) meshes
    bodies, gms, mats = [], [], []
    for mesh, spec in zip(meshes, config.bodies):
        dynamic = not spec.kinematic
        bodies.append(CollisionBody.from_mesh(mesh, dynamic=dynamic))
        if dynamic:
            gm, vol = mass_matrix(mesh, spec.density)
            gms.append(gm)
            mats.append(BodyMaterial(spec.density, spec.kappa_ortho, vol))
        else:
            gms.append(None)
            mats.append(None)

    model = SystemModel(bodies, gms, mats)
    q0 = np.asarray(states_q)
    if tets:
        reduction = build_constrained_system(
            [not s.kinematic for s in config.bodies], tets, q0
        )
        for (b, a_body, d_body, size) in anchor_rows:
            slot = model.slot_of[b]
            C, rhs = axis_anchor_rows(
                slot, model.n_dyn, a_body, d_body, q0[b], arm=size
            )
            reduction = constrain_linear(reduction, C, rhs)
        model.reduction = reduction

    # windowed external forces (normalized units: force ~ s^4, torque ~ s^5)
    gravity_n = config.gravity * scale
    body_radius = [
        float(np.linalg.norm(m.vertices - m.vertices.mean(axis=0), axis=1).max())
        for m in meshes
    ]
    force_specs = [
        (name_to_index[f.body], f.kind,
         f.vector * (scale**5 if f.kind == "torque" else scale**4),
         f.x_bar * scale - origin_shifts[name_to_index[f.body]],
         f.start, f.end)
        for f in config.forces
    ]

    def force_fn(step_index, t_next, q_all):
        out = np.zeros((len(bodies), 12))
        for b in model.dyn_indices:
            out[b] = external_generalized_force(gms[b], gravity_n)
        for (b, kind, vec, x_bar, start, end) in force_specs:
            if not (start <= t_next < end) or not model.dynamic[b]:
                continue
            if kind == "point":
                out[b] += external_generalized_force(
                    gms[b], np.zeros(3), [(x_bar, vec)]
                )
            else:
                A = q_all[b, 3:].reshape(3, 3)
                pairs = torque_point_forces(
                    vec, A, arm_scale=max(1e-6, 0.5 * body_radius[b])
                )
                out[b] += external_generalized_force(gms[b], np.zeros(3), pairs)
        return out

    model.force_fn = force_fn

    state = SimState(q=q0.copy(), q_dot=np.asarray(states_qdot))
    if model.reduction is not None:
        dyn_q = q0[model.dyn_indices].reshape(-1)
        state.u = model.reduction.extract_u(dyn_q)
        # project the state onto the constraint manifold exactly
        q_proj = model.reduction.expand(state.u).reshape(model.n_dyn, 12)
        state.q[model.dyn_indices] = q_proj
        state.u_dot = model.reduction.extract_u_rate(
            state.q_dot[model.dyn_indices].reshape(-1)
        )
        state.q_dot[model.dyn_indices] = (
            model.reduction.T @ state.u_dot
        ).reshape(model.n_dyn, 12)

    params_kwargs = dict(config.params)
    params_kwargs.setdefault("dt", 0.01)
    allowed = {f.name for f in dataclasses.fields(StepParams)} - {"workers"}
    unknown = set(params_kwargs) - allowed
    if unknown:
        raise ValueError(f"unknown step parameter(s): {sorted(unknown)}")
    params = StepParams(workers=config.output.workers, **params_kwargs)

    scene = SceneState(
        config=config,
        model=model,
        state=state,
        params=params,
        names=[s.name for s in config.bodies],
        meshes=meshes,
        scale=scale,
        origin=origin,
        scene_diameter=float(np.linalg.norm(hi - lo)),
    )

    # static geometry may touch by design; dynamics only ever move away
    # from it, so the load audit covers pairs with at least one dynamic body
    dyn_flags = [not s.kinematic for s in config.bodies]
    offenders = _intersecting_body_pairs(
        scene.world_vertices(denormalize=False),
        [m.triangles for m in meshes],
        skip_pair=lambda i, j: not (dyn_flags[i] or dyn_flags[j]),
    )
    if offenders:
        i, j = offenders[0]
        raise ValueError(
            f"initial configuration intersects: bodies "
            f"{scene.names[i]!r} and {scene.names[j]!r}"
        )
    return scene


# ---------------------------------------------------------------------------
# intersection audit


def _point_in_closed_mesh(point, verts, tris):
    """Ray-parity containment test (load-time validation only).

    The ray direction is fixed but skewed so axis-aligned geometry does not
    put feature boundaries exactly on the ray.
    """
    v0, v1, v2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    d = np.array([0.5424426421, 0.7866258632, 0.2954766431])
    e1 = v1 - v0
    e2 = v2 - v0
    h = np.cross(np.broadcast_to(d, e2.shape), e2)
    a = np.einsum("ij,ij->i", e1, h)
    mask = np.abs(a) > 1e-14
    f = np.zeros_like(a)
    f[mask] = 1.0 / a[mask]
    s = point - v0
    u = f * np.einsum("ij,ij->i", s, h)
    qv = np.cross(s, e1)
    v = f * (qv @ d)
    t = f * np.einsum("ij,ij->i", e2, qv)
    hits = mask & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
    return int(hits.sum()) % 2 == 1


def _intersecting_body_pairs(vertex_arrays, triangle_arrays, skip_pair=None):
    """Exact inter-body intersection test with box pruning.

    Also flags full containment (no surface crossing) via ray parity.
    """
    n = len(vertex_arrays)
    boxes = [(v.min(axis=0), v.max(axis=0)) for v in vertex_arrays]
    offenders = []
    for i in range(n):
        for j in range(i + 1, n):
            if skip_pair is not None and skip_pair(i, j):
                continue
            lo = np.maximum(boxes[i][0], boxes[j][0])
            hi = np.minimum(boxes[i][1], boxes[j][1])
            if np.any(lo > hi):
                continue
            if _pair_has_intersection(
                vertex_arrays[i], triangle_arrays[i],
                vertex_arrays[j], triangle_arrays[j], lo, hi,
            ):
                offenders.append((i, j))
    return offenders


def _pair_has_intersection(va, ta, vb, tb, lo, hi):
    tri_a = va[ta]  # (Ta, 3, 3)
    tri_b = vb[tb]
    alo, ahi = tri_a.min(axis=1), tri_a.max(axis=1)
    blo, bhi = tri_b.min(axis=1), tri_b.max(axis=1)
    keep_a = np.nonzero(np.all((alo <= hi) & (ahi >= lo), axis=1))[0]
    keep_b = np.nonzero(np.all((blo <= hi) & (bhi >= lo), axis=1))[0]
    if len(keep_a) and len(keep_b):
        hit = (
            (alo[keep_a][:, None, :] <= bhi[keep_b][None, :, :])
            & (blo[keep_b][None, :, :] <= ahi[keep_a][:, None, :])
        ).all(axis=2)
        ii, jj = np.nonzero(hit)
        for start in range(0, len(ii), 8192):
            sl = slice(start, start + 8192)
            if triangles_intersect_batch(
                tri_a[keep_a[ii[sl]]], tri_b[keep_b[jj[sl]]]
            ).any():
                return True
    # containment without surface crossing
    if _point_in_closed_mesh(va[0], vb, tb) or _point_in_closed_mesh(vb[0], va, ta):
        return True
    return False


def audit_intersections(frames_dir) -> list:
    """Exhaustive inter-body triangle intersection audit over written frames.

    Returns a list of (frame_path, body_i, body_j) violations; empty means
    every frame is intersection-free.
    """
    frames = sorted(Path(frames_dir).glob("frame_*.obj"))
    violations = []
    for frame in frames:
        objs = read_obj_objects(frame)
        verts = [v for (_, v, _) in objs]
        tris = [t for (_, _, t) in objs]
        for (i, j) in _intersecting_body_pairs(verts, tris):
            violations.append((str(frame), objs[i][0], objs[j][0]))
    return violations


# ---------------------------------------------------------------------------
# driver


def run(scene: SceneState, n_steps: int, out_dir=None, strict: bool = False,
        audit: bool | None = None, progress=None):
    """Advance the scene n_steps, writing frames and a stats table.

    Returns (stats_list, violations, any_nonconverged). Frame 0 is the
    initial state; one OBJ per output frame plus an append-only stats.csv
    go to out_dir (defaults to the scene's configured directory, else no
    files are written). Timing columns vary run to run; all other columns
    are deterministic for a fixed scene, seed and worker count.
    """
    out_dir = out_dir or scene.config.output.directory
    writing = out_dir is not None
    if writing:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stats_path = out / "stats.csv"
        stats_path.write_text(STATS_HEADER + "\n", encoding="utf-8")
    tris = [m.triangles for m in scene.meshes]

    def emit_frame(index):
        if writing:
            write_obj_frame(
                out / f"frame_{index:06d}.obj",
                scene.names,
                scene.world_vertices(denormalize=True),
                tris,
            )

    emit_frame(0)
    all_stats = []
    any_nonconverged = False
    interval = max(1, scene.config.output.frame_interval)
    for step in range(n_steps):
        scene.state, step_stats = advance_step(
            scene.model, scene.state, scene.params
        )
        any_nonconverged |= not step_stats.converged
        fs = FrameStats(
            step=step_stats.step,
            iterations=step_stats.iterations,
            converged=step_stats.converged,
            min_distance=min(step_stats.min_distance, scene.scene_diameter),
            candidates=step_stats.candidates,
            ip_value=step_stats.ip_value,
            max_ortho_error=step_stats.max_ortho_error,
            min_iterate_distance=min(
                step_stats.min_iterate_distance, scene.scene_diameter
            ),
            timings=step_stats.timings,
        )
        all_stats.append(fs)
        if writing:
            with open(stats_path, "a", encoding="utf-8") as fh:
                fh.write(fs.csv_row() + "\n")
        if (step + 1) % interval == 0:
            emit_frame(step + 1)
        if progress is not None:
            progress(step, fs)

    do_audit = scene.config.output.audit if audit is None else audit
    violations = []
    if do_audit and writing:
        violations = audit_intersections(out_dir)
    return all_stats, violations, any_nonconverged
