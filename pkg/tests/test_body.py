"""Kinematics, generalized mass, orthogonality energy, external forces."""
import numpy as np
import pytest

from stiffbody.body import (
    BodyCoords,
    BodyMaterial,
    GeneralizedMass,
    external_generalized_force,
    jacobian,
    mass_matrix,
    ortho_energy,
    ortho_error,
    ortho_gradient,
    ortho_hessian,
    project_psd,
    torque_point_forces,
    world_position,
)
from stiffbody.mesh import SurfaceMesh
from stiffbody.shapes import box_mesh, icosphere_mesh


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_world_position_identity_and_translation():
    q = BodyCoords.identity()
    assert np.allclose(world_position(q, [1, 2, 3]), [1, 2, 3])
    q = BodyCoords.from_parts([1, 0, 0], np.eye(3))
    assert np.allclose(world_position(q, [0, 0, 0]), [1, 0, 0])
    q = BodyCoords.from_parts([0, 0, 0], np.diag([2.0, 1.0, 1.0]))
    assert np.allclose(world_position(q, [1, 1, 1]), [2, 1, 1])


def test_jacobian_identities():
    assert np.allclose(jacobian([0, 0, 0]), np.hstack([np.eye(3), np.zeros((3, 9))]))
    rng = np.random.default_rng(0)
    for _ in range(100):
        q = rng.normal(size=12)
        x = rng.normal(size=3)
        assert np.allclose(jacobian(x) @ q, world_position(q, x))
    # finite differences of x(q)
    q = rng.normal(size=12)
    x = rng.normal(size=3)
    J = jacobian(x)
    h = 1e-6
    for i in range(12):
        qp, qm = q.copy(), q.copy()
        qp[i] += h
        qm[i] -= h
        col = (world_position(qp, x) - world_position(qm, x)) / (2 * h)
        assert np.allclose(col, J[:, i], atol=1e-8)


def test_mass_matrix_unit_cube():
    gm, volume = mass_matrix(box_mesh(1.0), density=1.0)
    assert volume == pytest.approx(1.0, abs=1e-12)
    assert gm.mass == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(gm.first_moment, 0.0, atol=1e-12)
    assert np.allclose(gm.second_moment, np.eye(3) / 12.0, atol=1e-12)
    expected = np.zeros((12, 12))
    expected[:3, :3] = np.eye(3)
    expected[3:, 3:] = np.kron(np.eye(3), np.eye(3) / 12.0)
    assert np.allclose(gm.matrix, expected, atol=1e-12)


def test_mass_matrix_monte_carlo_cross_check():
    rng = np.random.default_rng(1)
    pts = rng.random((1_000_000, 3)) - 0.5
    mc_second = pts.T @ pts / len(pts)
    gm, _ = mass_matrix(box_mesh(1.0), density=1.0)
    assert np.allclose(gm.second_moment, mc_second, atol=1e-3)


def test_mass_matrix_translation_covariance():
    t = np.array([0.3, -0.2, 0.7])
    gm0, v0 = mass_matrix(box_mesh(1.0), density=2.0)
    gm1, v1 = mass_matrix(box_mesh(1.0, center=t), density=2.0)
    assert v0 == pytest.approx(v1)
    assert gm1.mass == pytest.approx(gm0.mass)
    assert np.allclose(gm1.first_moment, gm0.mass * t, atol=1e-12)


def test_mass_matrix_spd_for_random_closed_meshes():
    for mesh in [icosphere_mesh(0.7, 1), box_mesh([0.2, 2.0, 1.0], center=(5, 5, 5))]:
        gm, vol = mass_matrix(mesh, density=3.0)
        assert vol > 0
        np.linalg.cholesky(gm.matrix)  # raises if not SPD


def test_mass_matrix_rejects_open_and_inverted():
    open_mesh = SurfaceMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [(0, 1, 2)])
    with pytest.raises(ValueError):
        mass_matrix(open_mesh, 1.0)
    cube = box_mesh(1.0)
    inverted = SurfaceMesh(cube.vertices, cube.triangles[:, ::-1])
    with pytest.raises(ValueError):
        mass_matrix(inverted, 1.0)


def frobenius_form(q, material):
    A = np.asarray(q, dtype=float)[3:].reshape(3, 3)
    return material.stiffness_scale * np.linalg.norm(A @ A.T - np.eye(3)) ** 2


def test_ortho_energy_zero_at_rotations():
    rng = np.random.default_rng(2)
    mat = BodyMaterial(density=1.0, kappa_ortho=1.0, volume=1.0)
    assert ortho_energy(BodyCoords.identity(), mat) == 0.0
    for _ in range(20):
        q = BodyCoords.from_parts(rng.normal(size=3), random_rotation(rng))
        assert abs(ortho_energy(q, mat)) < 1e-12


def test_ortho_energy_diag_example():
    mat = BodyMaterial(density=1.0, kappa_ortho=1.0, volume=1.0)
    q = BodyCoords.from_parts(np.zeros(3), np.diag([2.0, 1.0, 1.0]))
    assert ortho_energy(q, mat) == pytest.approx(9.0)


def test_ortho_polynomial_equals_frobenius_form():
    rng = np.random.default_rng(3)
    mat = BodyMaterial(density=1.0, kappa_ortho=7.5, volume=0.3)
    for _ in range(200):
        q = rng.uniform(-2, 2, size=12)
        e = ortho_energy(q, mat)
        f = frobenius_form(q, mat)
        assert e == pytest.approx(f, rel=1e-12, abs=1e-12)


def test_ortho_gradient_matches_fd():
    rng = np.random.default_rng(4)
    mat = BodyMaterial(density=1.0, kappa_ortho=2.0, volume=1.1)
    h = 1e-5
    for _ in range(300):
        q = rng.uniform(-2, 2, size=12)
        g = ortho_gradient(q, mat)
        assert np.allclose(g[:3], 0.0)
        fd = np.zeros(12)
        for i in range(12):
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            fd[i] = (ortho_energy(qp, mat) - ortho_energy(qm, mat)) / (2 * h)
        scale = max(1.0, np.abs(g).max())
        assert np.allclose(g, fd, atol=1e-6 * scale)


def test_ortho_gradient_zero_at_identity():
    mat = BodyMaterial(density=1.0, kappa_ortho=5.0, volume=2.0)
    assert np.allclose(ortho_gradient(BodyCoords.identity(), mat), 0.0)


def test_ortho_hessian_matches_fd():
    rng = np.random.default_rng(5)
    mat = BodyMaterial(density=1.0, kappa_ortho=1.0, volume=1.0)
    h = 1e-5
    for _ in range(100):
        q = rng.uniform(-2, 2, size=12)
        H = ortho_hessian(q, mat)
        assert np.allclose(H, H.T)
        fd = np.zeros((12, 12))
        for i in range(12):
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            fd[:, i] = (ortho_gradient(qp, mat) - ortho_gradient(qm, mat)) / (2 * h)
        scale = max(1.0, np.abs(H).max())
        assert np.allclose(H, fd, atol=1e-5 * scale)


def test_ortho_hessian_psd_at_identity_unprojected():
    mat = BodyMaterial(density=1.0, kappa_ortho=1.0, volume=1.0)
    H = ortho_hessian(BodyCoords.identity(), mat)
    assert np.linalg.eigvalsh(H).min() >= -1e-12


def test_psd_projection_only_lifts():
    rng = np.random.default_rng(6)
    mat = BodyMaterial(density=1.0, kappa_ortho=1.0, volume=1.0)
    for _ in range(50):
        q = rng.uniform(-2, 2, size=12)
        H = ortho_hessian(q, mat)
        Hp = ortho_hessian(q, mat, project_psd=True)
        assert np.linalg.eigvalsh(Hp).min() >= -1e-10 * max(1, np.abs(Hp).max())
        diff_eigs = np.linalg.eigvalsh(Hp - H)
        assert diff_eigs.min() >= -1e-8 * max(1, np.abs(H).max())


def test_ortho_translation_invariance():
    rng = np.random.default_rng(7)
    mat = BodyMaterial(density=1.0, kappa_ortho=3.0, volume=1.0)
    q = rng.normal(size=12)
    q2 = q.copy()
    q2[:3] += rng.normal(size=3)
    assert ortho_energy(q, mat) == ortho_energy(q2, mat)
    assert np.array_equal(ortho_gradient(q, mat), ortho_gradient(q2, mat))
    assert np.array_equal(ortho_hessian(q, mat), ortho_hessian(q2, mat))


def test_external_force_gravity_centered_cube():
    gm, _ = mass_matrix(box_mesh(1.0), density=1.0)
    f = external_generalized_force(gm, [0, 0, -9.8])
    expected = np.zeros(12)
    expected[2] = -9.8
    assert np.allclose(f, expected, atol=1e-12)


def test_external_force_point_at_origin():
    gm = GeneralizedMass.from_moments(1.0, np.zeros(3), np.eye(3))
    f = external_generalized_force(gm, np.zeros(3), [(np.zeros(3), [1.0, 2.0, 3.0])])
    assert np.allclose(f[:3], [1, 2, 3])
    assert np.allclose(f[3:], 0.0)


def test_external_force_antisymmetric_pair_cancels_translation():
    gm = GeneralizedMass.from_moments(1.0, np.zeros(3), np.eye(3))
    x = np.array([0.2, 0.1, -0.3])
    fv = np.array([0.0, 1.0, 0.0])
    f = external_generalized_force(gm, np.zeros(3), [(x, fv), (-x, -fv)])
    assert np.allclose(f[:3], 0.0, atol=1e-15)
    assert not np.allclose(f[3:], 0.0)


def test_torque_point_forces_produce_requested_torque():
    rng = np.random.default_rng(8)
    for _ in range(20):
        tau = rng.normal(size=3)
        A = random_rotation(rng)
        (x1, f1), (x2, f2) = torque_point_forces(tau, A, arm_scale=0.5)
        assert np.allclose(x2, -x1) and np.allclose(f2, -f1)
        world_torque = np.cross(A @ x1, f1) + np.cross(A @ x2, f2)
        assert np.allclose(world_torque, tau, atol=1e-12)


def test_ortho_error_monitor():
    assert ortho_error(BodyCoords.identity()) == 0.0
    q = BodyCoords.from_parts(np.zeros(3), np.diag([2.0, 1.0, 1.0]))
    assert ortho_error(q) == pytest.approx(3.0)


def test_project_psd_batched():
    rng = np.random.default_rng(9)
    H = rng.normal(size=(10, 6, 6))
    H = H + np.swapaxes(H, 1, 2)
    P = project_psd(H)
    for i in range(10):
        assert np.linalg.eigvalsh(P[i]).min() >= -1e-10
        single = project_psd(H[i])
        assert np.allclose(single, P[i], atol=1e-12)
