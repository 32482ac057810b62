"""Virtual-tetrahedron reparameterization and joint elimination."""
import numpy as np
import pytest

from stiffbody.body import BodyCoords, BodyMaterial, mass_matrix, external_generalized_force
from stiffbody.constraints import (
    Reduction,
    VirtualTet,
    build_constrained_system,
    make_axis_tet,
    make_free_tet,
    phi,
    regular_tet_vertices,
    reparam_map,
    tet_world_vertices,
)
from stiffbody.contact import CollisionBody
from stiffbody.shapes import box_mesh, prism_mesh
from stiffbody.solver import SimState, StepParams, SystemModel, advance_step


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_phi_rest_recovery():
    P_bar = regular_tet_vertices(0.7)
    coords = phi(P_bar, P_bar)
    assert np.allclose(coords.p, 0.0, atol=1e-14)
    assert np.allclose(coords.A, np.eye(3), atol=1e-13)


def test_phi_translation_and_scaling():
    P_bar = regular_tet_vertices(1.0)
    t = np.array([0.3, -0.1, 0.7])
    coords = phi(P_bar + t[:, None], P_bar)
    assert np.allclose(coords.p, t, atol=1e-13)
    assert np.allclose(coords.A, np.eye(3), atol=1e-13)
    coords = phi(2.0 * P_bar, P_bar)
    assert np.allclose(coords.p, 0.0, atol=1e-13)
    assert np.allclose(coords.A, 2.0 * np.eye(3), atol=1e-13)


def test_phi_round_trip_general_affine():
    rng = np.random.default_rng(0)
    P_bar = regular_tet_vertices(1.0)
    for _ in range(100):
        A = np.eye(3) + 0.5 * rng.normal(size=(3, 3))
        p = rng.normal(size=3)
        P = A @ P_bar + p[:, None]
        coords = phi(P, P_bar)
        assert np.allclose(coords.p, p, atol=1e-12)
        assert np.allclose(coords.A, A, atol=1e-12)


def test_phi_linearity_superposition():
    rng = np.random.default_rng(1)
    P_bar = regular_tet_vertices(1.0)
    for _ in range(50):
        P1 = rng.normal(size=(3, 4))
        P2 = rng.normal(size=(3, 4))
        a, b = rng.normal(size=2)
        lhs = phi(a * P1 + b * P2, P_bar).q
        rhs = a * phi(P1, P_bar).q + b * phi(P2, P_bar).q + (1 - a - b) * phi(
            np.zeros((3, 4)), P_bar
        ).q
        assert np.allclose(lhs, rhs, atol=1e-10)


def test_reparam_map_matches_fd_and_is_constant():
    rng = np.random.default_rng(2)
    P_bar = regular_tet_vertices(0.9)
    rep = reparam_map(P_bar)
    h = 1e-6
    for k in range(12):
        e = np.zeros(12)
        e[k] = h
        Pp = (e / 1.0).reshape(4, 3).T
        fd = (phi(Pp, P_bar).q - phi(-Pp, P_bar).q) / (2 * h)
        assert np.allclose(rep.G[:, k], fd, atol=1e-9)
    # exact linearity on random pairs
    for _ in range(50):
        v1, v2 = rng.normal(size=(2, 12))
        d1 = phi(v1.reshape(4, 3).T, P_bar).q - phi(v2.reshape(4, 3).T, P_bar).q
        assert np.allclose(d1, rep.G @ (v1 - v2), atol=1e-12)
    rep2 = reparam_map(P_bar)
    assert np.array_equal(rep.G, rep2.G)


def test_degenerate_tet_rejected():
    flat = np.array([[0, 1, 2, 3], [0, 0, 0, 0], [0, 1, 0, 1]], dtype=float)
    with pytest.raises(ValueError):
        VirtualTet(flat)


def test_axis_tet_geometry():
    point = np.array([0.3, 0.0, 0.0])
    direction = np.array([0.0, 0.0, 1.0])
    tet = make_axis_tet(point, direction, size=0.5)
    P = tet.rest_vertices
    assert np.allclose(P.mean(axis=1), 0.0, atol=1e-12)
    # fixed edge lies on the prescribed line
    for v in (1, 3):
        offset = P[:, v] - point
        perp = offset - (offset @ direction) * direction
        assert np.allclose(perp, 0.0, atol=1e-12)
    assert tet.fixed_dof_mask[3:6].all() and tet.fixed_dof_mask[9:12].all()
    assert tet.fixed_dof_mask.sum() == 6


def test_axis_through_origin_rejected():
    with pytest.raises(ValueError):
        make_axis_tet([0, 0, 0], [0, 0, 1], size=0.5)


def test_free_tet_matches_unconstrained_path():
    # identical falling body simulated with and without an (unfixed) proxy
    mesh = box_mesh(0.4)

    def gravity(model):
        def fn(step, t, q):
            out = np.zeros((len(model.bodies), 12))
            for b in model.dyn_indices:
                out[b] = external_generalized_force(model.gmass[b], [0, 0, -9.8])
            return out
        return fn

    # equivalence is a similarity reparameterization, exact at convergence:
    # drive both paths essentially to machine precision
    params = StepParams(dt=0.01, newton_tol=1e-11)
    results = []
    for constrained in (False, True):
        bodies = [CollisionBody.from_mesh(mesh)]
        gm, vol = mass_matrix(mesh, 1000.0)
        model = SystemModel(
            [CollisionBody.from_mesh(mesh)], [gm],
            [BodyMaterial(1000.0, 1e11, vol)],
        )
        model.force_fn = gravity(model)
        q0 = np.tile(BodyCoords.identity().q, (1, 1))
        if constrained:
            model.reduction = build_constrained_system(
                [True], {0: make_free_tet(size=0.5)}, q0
            )
        state = SimState(q=q0.copy(), q_dot=np.zeros((1, 12)))
        state.q_dot[0, :3] = [0.1, 0.2, 0.0]
        for _ in range(10):
            state, _ = advance_step(model, state, params)
        results.append(state.q.copy())
    assert np.allclose(results[0], results[1], rtol=0, atol=1e-12)


def test_axis_constrained_rotor_stays_on_circles():
    # prism constrained to an axis offset from its center; torque applied
    from stiffbody.body import torque_point_forces

    mesh = prism_mesh(8, radius=0.3, height=0.2, axis=2)
    axis_point = np.array([0.1, 0.05, 0.0])
    axis_dir = np.array([0.0, 0.0, 1.0])
    tet = make_axis_tet(axis_point, axis_dir, size=0.3)

    gm, vol = mass_matrix(mesh, 1000.0)
    model = SystemModel(
        [CollisionBody.from_mesh(mesh)], [gm], [BodyMaterial(1000.0, 1e11, vol)]
    )

    def torque_fn(step, t, q):
        A = q[0, 3:].reshape(3, 3)
        pairs = torque_point_forces([0, 0, 2.0], A, arm_scale=0.2)
        return np.asarray(
            [external_generalized_force(gm, np.zeros(3), pairs)]
        )

    model.force_fn = torque_fn
    q0 = np.tile(BodyCoords.identity().q, (1, 1))
    model.reduction = build_constrained_system([True], {0: tet}, q0)
    state = SimState(q=q0.copy(), q_dot=np.zeros((1, 12)))
    params = StepParams(dt=0.01, newton_tol=1e-6)

    rest = mesh.vertices
    r0 = rest - axis_point  # initial world == rest frame
    radial0 = np.linalg.norm(r0[:, :2], axis=1)
    z0 = rest[:, 2]
    total_rotation = 0.0
    prev_angle = None
    for _ in range(40):
        state, _ = advance_step(model, state, params)
        A = state.q[0, 3:].reshape(3, 3)
        p = state.q[0, :3]
        world = rest @ A.T + p
        rel = world - axis_point
        radial = np.linalg.norm(rel[:, :2], axis=1)
        assert np.abs(radial - radial0).max() < 1e-6
        assert np.abs(rel[:, 2] - (z0 - axis_point[2])).max() < 1e-6
    # it actually rotated
    ang = np.arctan2(A[1, 0], A[0, 0])
    assert abs(ang) > 1e-3


def test_hinge_shared_vertices_bitwise():
    # two bars hinged end to end; shared proxy vertices read identically
    bar = box_mesh([0.4, 0.1, 0.1])
    hinge_world = np.array([0.21, 0.0, 0.0])
    direction = np.array([0.0, 1.0, 0.0])
    q0 = np.tile(BodyCoords.identity().q, (2, 1))
    q0[1, :3] = [0.42, 0.0, 0.0]  # second bar to the right, small clear gap

    # per-body axis tets with the hinge line mapped into each body frame
    tet_a = make_axis_tet(hinge_world, direction, size=0.1, fix_edge=False)
    point_b = hinge_world - q0[1, :3]
    tet_b_raw = make_axis_tet(point_b, direction, size=0.1, fix_edge=False)
    tet_b = VirtualTet(
        tet_b_raw.rest_vertices,
        np.zeros(12, dtype=bool),
        shared_vertex_links=((1, 0, 1), (3, 0, 3)),
    )

    gm_vol = [mass_matrix(bar, 1000.0) for _ in range(2)]
    model = SystemModel(
        [CollisionBody.from_mesh(bar) for _ in range(2)],
        [gv[0] for gv in gm_vol],
        [BodyMaterial(1000.0, 1e10, gv[1]) for gv in gm_vol],
    )

    def gravity(step, t, q):
        return np.asarray(
            [
                external_generalized_force(gm_vol[0][0], [0, 0, -9.8]),
                external_generalized_force(gm_vol[1][0], [0, 0, -9.8]),
            ]
        )

    model.force_fn = gravity
    # anchor the first bar's hinge edge in space, link the second bar to it
    tet_a_fixed = VirtualTet(
        tet_a.rest_vertices,
        tet_a.fixed_dof_mask | np.array([False] * 3 + [True] * 3 + [False] * 3 + [True] * 3),
    )
    model.reduction = build_constrained_system(
        [True, True], {0: tet_a_fixed, 1: tet_b}, q0
    )
    state = SimState(q=q0.copy(), q_dot=np.zeros((2, 12)))
    state.u = model.reduction.extract_u(state.q[model.dyn_indices].reshape(-1))
    params = StepParams(dt=0.01, newton_tol=1e-6)
    red = model.reduction
    for _ in range(20):
        state, _ = advance_step(model, state, params)
        vec_a = red.proxy_vertex_entries(0, state.u)
        vec_b = red.proxy_vertex_entries(1, state.u)
        # shared vertices 1 and 3: bitwise identical entries
        assert np.array_equal(vec_a[3:6], vec_b[3:6])
        assert np.array_equal(vec_a[9:12], vec_b[9:12])
        # fixed anchor entries bitwise constant
        assert np.array_equal(vec_a[3:6], red.entry_maps[0][1][3:6])


def test_over_constrained_rejected():
    q0 = np.tile(BodyCoords.identity().q, (1, 1))
    tet = VirtualTet(regular_tet_vertices(1.0) + np.array([1.0, 0, 0])[:, None],
                     np.ones(12, dtype=bool))
    with pytest.raises(ValueError):
        build_constrained_system([True], {0: tet}, q0)


def test_link_to_missing_tet_rejected():
    q0 = np.tile(BodyCoords.identity().q, (2, 1))
    tet = VirtualTet(
        regular_tet_vertices(1.0), shared_vertex_links=((0, 1, 0),)
    )
    with pytest.raises(ValueError):
        build_constrained_system([True, True], {0: tet}, q0)
