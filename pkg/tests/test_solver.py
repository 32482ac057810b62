"""Incremental potential, assembly, Newton stepping, and momentum checks."""
import numpy as np
import pytest

from stiffbody.body import BodyCoords, BodyMaterial, external_generalized_force, mass_matrix
from stiffbody.contact import CollisionBody, broad_phase, friction_precompute
from stiffbody.shapes import box_mesh, icosphere_mesh
from stiffbody.solver import (
    IncrementalPotentialState,
    SimState,
    StepParams,
    SystemModel,
    advance_step,
    assemble,
    compute_q_tilde,
    global_min_distance,
    ip_value,
    line_search,
    solve_newton_system,
)
from stiffbody.sparse import BlockSparseMatrix


def make_model(meshes, density=1000.0, kappa=1e11, kinematic=None, force_fn=None):
    kinematic = kinematic or [False] * len(meshes)
    bodies, gms, mats = [], [], []
    for mesh, kin in zip(meshes, kinematic):
        bodies.append(CollisionBody.from_mesh(mesh, dynamic=not kin))
        if kin:
            gms.append(None)
            mats.append(None)
        else:
            gm, vol = mass_matrix(mesh, density)
            gms.append(gm)
            mats.append(BodyMaterial(density, kappa, vol))
    return SystemModel(bodies, gms, mats, force_fn=force_fn)


def identity_state(n):
    q = np.tile(BodyCoords.identity().q, (n, 1))
    return SimState(q=q, q_dot=np.zeros((n, 12)))


def gravity_force_fn(model, g=(0, 0, -9.8)):
    def fn(step, t, q):
        out = np.zeros((len(model.bodies), 12))
        for b in model.dyn_indices:
            out[b] = external_generalized_force(model.gmass[b], g)
        return out

    return fn


def test_q_tilde_formula():
    model = make_model([box_mesh(0.5)])
    params = StepParams(dt=0.01)
    state = identity_state(1)
    # zero velocity, zero force
    qt = compute_q_tilde(model, state, params, np.zeros((1, 12)))
    assert np.allclose(qt, state.q)
    # free body with velocity
    state.q_dot[0, 0] = 2.0
    qt = compute_q_tilde(model, state, params, np.zeros((1, 12)))
    assert np.allclose(qt[0], state.q[0] + params.dt * state.q_dot[0])
    # gravity on a centered cube: translation picks up dt^2 g exactly
    f = external_generalized_force(model.gmass[0], [0, 0, -9.8])
    qt = compute_q_tilde(model, state, params, f[None])
    expected = state.q[0] + params.dt * state.q_dot[0]
    expected = expected.copy()
    expected[2] += params.dt**2 * -9.8
    assert np.allclose(qt[0], expected, atol=1e-14)


def make_ip(model, state, params, q=None):
    q0 = state.q if q is None else q
    cands = broad_phase(model.bodies, q0, q0, params.d_hat)
    fric = friction_precompute(
        model.bodies, q0, cands, params.kappa_barrier, params.d_hat, params.mu
    )
    forces = model.forces(0, params.dt, q0)
    q_tilde = compute_q_tilde(model, state, params, forces)
    return IncrementalPotentialState(
        q0.copy(), state.q_dot.copy(), q_tilde, fric, cands, model
    )


def test_ip_value_trivial_cases():
    model = make_model([box_mesh(0.5)])
    params = StepParams(dt=0.01)
    state = identity_state(1)
    ip = make_ip(model, state, params)
    # q = q_tilde, orthogonal A, no contacts
    assert ip_value(ip.q_tilde, ip, params) == pytest.approx(0.0, abs=1e-18)
    # no contacts: pure inertial quadratic
    q2 = state.q.copy()
    q2[0, :3] += [0.01, -0.02, 0.005]
    diff = (q2[0] - ip.q_tilde[0])
    expected = 0.5 * diff @ model.gmass[0].matrix @ diff
    assert ip_value(q2, ip, params) == pytest.approx(expected, rel=1e-12)


def two_cube_contact_model(gap_frac=0.5, d_hat=1e-2):
    meshes = [box_mesh(1.0), box_mesh(1.0, center=(1.0 + gap_frac * d_hat, 0.21, 0.13))]
    model = make_model(meshes, density=1.0, kappa=1.0)
    state = identity_state(2)
    params = StepParams(dt=0.01, d_hat=d_hat, kappa_barrier=10.0, mu=0.3)
    return model, state, params


def test_assemble_gradient_matches_fd_with_contact():
    rng = np.random.default_rng(0)
    model, state, params = two_cube_contact_model()
    state.q_dot[1, 0] = -0.5
    q = state.q.copy()
    q[1, 3:] += 0.01 * rng.normal(size=9)
    ip = make_ip(model, state, params, q=q)
    grad, _ = assemble(q, ip, params)
    h = 1e-6
    fd = np.zeros(24)
    flat = q.copy().reshape(-1)
    for i in range(24):
        qp, qm = flat.copy(), flat.copy()
        qp[i] += h
        qm[i] -= h
        fd[i] = (
            ip_value(qp.reshape(2, 12), ip, params)
            - ip_value(qm.reshape(2, 12), ip, params)
        ) / (2 * h)
    scale = max(1.0, np.abs(grad).max())
    assert np.allclose(grad, fd, atol=2e-5 * scale)


def test_assemble_pattern_no_contacts():
    model = make_model([box_mesh(0.5), box_mesh(0.5, center=(5, 0, 0))])
    params = StepParams(dt=0.01)
    state = identity_state(2)
    state.q[1, 0] = 5.0
    ip = make_ip(model, state, params)
    _, H = assemble(state.q, ip, params)
    assert len(H.off) == 0


def test_assemble_pattern_two_bodies_in_contact():
    model, state, params = two_cube_contact_model()
    ip = make_ip(model, state, params)
    _, H = assemble(state.q, ip, params)
    assert set(H.off.keys()) == {(0, 1)}


def test_assemble_worker_count_bitwise_identical():
    model, state, params = two_cube_contact_model()
    ip = make_ip(model, state, params)
    grads, hessians = [], []
    for workers in (1, 2, 4, 7):
        params_w = StepParams(
            dt=params.dt, d_hat=params.d_hat, kappa_barrier=params.kappa_barrier,
            mu=params.mu, workers=workers,
        )
        g, H = assemble(state.q, ip, params_w)
        grads.append(g)
        hessians.append(H.to_dense())
    for g, H in zip(grads[1:], hessians[1:]):
        assert np.array_equal(g, grads[0])
        assert np.array_equal(H, hessians[0])


def test_solve_newton_system_matches_dense():
    rng = np.random.default_rng(1)
    H = BlockSparseMatrix(3, [(0, 1), (1, 2)])
    for i in range(3):
        G = rng.normal(size=(12, 12))
        H.add_diag(i, G @ G.T + 12 * np.eye(12))
    H.add_off(0, 1, 0.1 * rng.normal(size=(12, 12)))
    H.add_off(1, 2, 0.1 * rng.normal(size=(12, 12)))
    g = rng.normal(size=36)
    dq = solve_newton_system(H, g)
    dense = np.linalg.solve(H.to_dense(), -g)
    assert np.allclose(dq, dense, rtol=1e-8, atol=1e-12)
    assert np.linalg.norm(H.matvec(dq) + g) <= 1e-8 * np.linalg.norm(g)


def test_line_search_full_step_without_contacts():
    model = make_model([box_mesh(0.5)])
    params = StepParams(dt=0.01)
    state = identity_state(1)
    state.q_dot[0, 1] = 1.0
    ip = make_ip(model, state, params)
    delta = (ip.q_tilde - state.q)
    alpha, _ = line_search(state.q, delta, ip, params)
    assert alpha == 1.0


def test_advance_step_free_body_translates_exactly():
    model = make_model([box_mesh(0.5)])
    params = StepParams(dt=0.01)
    state = identity_state(1)
    state.q_dot[0, :3] = [0.3, -0.1, 0.2]
    for _ in range(5):
        new_state, stats = advance_step(model, state, params)
        expected = state.q[0] + params.dt * state.q_dot[0]
        assert np.abs(new_state.q[0] - expected).max() <= 1e-12
        assert stats.iterations == 1
        assert stats.converged
        state = new_state


def test_advance_step_momentum_conservation_with_rotation():
    # spinning body, no forces/contacts: translation block of M qdot constant
    mesh = box_mesh([0.4, 0.3, 0.5], center=(0.1, 0.0, 0.05))  # non-centered
    model = make_model([mesh], density=500.0, kappa=1e9)
    params = StepParams(dt=0.01, newton_tol=1e-10, max_newton_iters=50)
    state = identity_state(1)
    state.q_dot[0, 3:] = [0, -0.4, 0, 0.4, 0, 0, 0, 0, 0]  # rotation about z
    state.q_dot[0, :3] = [0.05, 0.0, -0.02]
    M = model.gmass[0].matrix

    def momentum(s):
        return (M @ s.q_dot[0])[:3]

    p0 = momentum(state)
    for _ in range(20):
        state, stats = advance_step(model, state, params)
        assert np.allclose(momentum(state), p0, rtol=0, atol=1e-10 * max(1, np.abs(p0).max()))


def test_advance_step_cube_settles_on_floor():
    floor = box_mesh([4.0, 4.0, 0.5], center=(0, 0, -0.25))
    cube = box_mesh(0.4, center=(0, 0, 0.2 + 0.5e-3))
    model = make_model([floor, cube], kinematic=[True, False])
    model.force_fn = gravity_force_fn(model)
    params = StepParams(dt=0.01, d_hat=1e-3, kappa_barrier=1e4)
    state = identity_state(2)
    for _ in range(60):
        state, stats = advance_step(model, state, params)
        assert stats.min_distance > 0.0
    # settled: min distance within (0, d_hat)
    assert 0.0 < stats.min_distance < params.d_hat
    assert np.abs(state.q_dot[1]).max() < 0.05


def test_advance_step_energy_trace_decreases():
    floor = box_mesh([4.0, 4.0, 0.5], center=(0, 0, -0.25))
    cube = box_mesh(0.4, center=(0, 0, 0.5))
    model = make_model([floor, cube], kinematic=[True, False])
    model.force_fn = gravity_force_fn(model)
    params = StepParams(dt=0.02, d_hat=1e-3)
    state = identity_state(2)
    state.q_dot[1, 2] = -1.0
    for _ in range(30):
        state, stats = advance_step(model, state, params)
        trace = stats.energy_trace
        assert all(b < a for a, b in zip(trace, trace[1:]))


def test_global_min_distance_matches_direct():
    model, state, params = two_cube_contact_model(gap_frac=0.5)
    got = global_min_distance(model.bodies, state.q)
    assert got == pytest.approx(0.5 * params.d_hat, rel=1e-9)


def test_nonconvergence_warns_but_completes():
    floor = box_mesh([4.0, 4.0, 0.5], center=(0, 0, -0.25))
    cube = box_mesh(0.4, center=(0, 0, 0.6))
    model = make_model([floor, cube], kinematic=[True, False])
    model.force_fn = gravity_force_fn(model)
    params = StepParams(dt=0.05, d_hat=1e-3, max_newton_iters=1)
    state = identity_state(2)
    state.q_dot[1, 2] = -2.0
    with pytest.warns(RuntimeWarning):
        for _ in range(10):
            state, stats = advance_step(model, state, params)
            assert stats.min_distance > 0.0
