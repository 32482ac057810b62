"""Conservative-advancement CCD against sampled-trajectory oracles."""
import numpy as np
import pytest

from stiffbody.body import BodyCoords
from stiffbody.ccd import CcdQuery, accd_toi, accd_toi_batch, step_filter
from stiffbody.contact import CollisionBody, broad_phase, world_positions_all
from stiffbody.distance import edge_edge_closest, point_triangle_closest
from stiffbody.shapes import box_mesh


def sampled_min_distance(kind, x, dx, t_end, samples=100_000):
    """Exact distance sampled densely along tau in [0, t_end]."""
    taus = np.linspace(0.0, t_end, samples)
    pts = x[None] + taus[:, None, None] * dx[None]
    if kind == "vertex-face":
        d2, _, _ = point_triangle_closest(pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3])
    else:
        d2, _, _, _ = edge_edge_closest(pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3])
    return np.sqrt(d2.min())


def test_vertex_drop_onto_triangle():
    x = np.array([[0.2, 0.2, 1.0], [0, 0, 0], [1, 0, 0], [0, 1, 0]])
    dx = np.zeros((4, 3))
    dx[0] = [0, 0, -2.0]
    q = CcdQuery("vertex-face", x, dx, slack=0.1)
    t = accd_toi(q)
    assert t <= 0.5  # true contact at t = 0.5
    min_d = sampled_min_distance("vertex-face", x, dx, t, samples=10_000)
    assert min_d >= 0.1 * 1.0 - 1e-9


def test_separating_motion_full_step():
    x = np.array([[0.2, 0.2, 1.0], [0, 0, 0], [1, 0, 0], [0, 1, 0]])
    dx = np.zeros((4, 3))
    dx[0] = [0, 0, +2.0]
    assert accd_toi(CcdQuery("vertex-face", x, dx)) == 1.0


def test_no_relative_motion_full_step():
    x = np.array([[0.2, 0.2, 1.0], [0, 0, 0], [1, 0, 0], [0, 1, 0]])
    dx = np.tile([[0.3, -0.2, 0.9]], (4, 1))  # common translation
    assert accd_toi(CcdQuery("vertex-face", x, dx)) == 1.0


def test_parallel_edges_approaching():
    x = np.array([[0, 0, 1.0], [1, 0, 1.0], [0, 0, 0], [1, 0, 0]])
    dx = np.zeros((4, 3))
    dx[:2] = [0, 0, -2.0]
    t = accd_toi(CcdQuery("edge-edge", x, dx, slack=0.1))
    assert t <= 0.5
    min_d = sampled_min_distance("edge-edge", x, dx, t, samples=10_000)
    assert min_d >= 0.1 * 1.0 - 1e-9


def random_query(rng, kind):
    x = rng.normal(size=(4, 3))
    if kind == "vertex-face":
        d2 = point_triangle_closest(x[0], x[1], x[2], x[3])[0][0]
    else:
        d2 = edge_edge_closest(x[0], x[1], x[2], x[3])[0][0]
    if d2 < 1e-6:
        return None
    dx = rng.normal(size=(4, 3)) * rng.uniform(0.1, 2.0)
    return x, dx


@pytest.mark.parametrize("kind", ["vertex-face", "edge-edge"])
def test_soundness_random_queries(kind):
    rng = np.random.default_rng(0)
    count = 0
    while count < 200:
        q = random_query(rng, kind)
        if q is None:
            continue
        x, dx = q
        t = accd_toi(CcdQuery(kind, x, dx, slack=0.1))
        assert 0.0 < t <= 1.0
        if t > 0:
            min_d = sampled_min_distance(kind, x, dx, t, samples=20_000)
            assert min_d > 0.0  # never reaches contact before returned t
        count += 1


def test_monotone_in_slack():
    rng = np.random.default_rng(1)
    for _ in range(50):
        q = random_query(rng, "vertex-face")
        if q is None:
            continue
        x, dx = q
        t_loose = accd_toi(CcdQuery("vertex-face", x, dx, slack=0.3))
        t_tight = accd_toi(CcdQuery("vertex-face", x, dx, slack=0.05))
        assert t_tight >= t_loose - 1e-12


def test_batch_matches_scalar():
    rng = np.random.default_rng(2)
    xs, dxs = [], []
    while len(xs) < 32:
        q = random_query(rng, "edge-edge")
        if q is None:
            continue
        xs.append(q[0])
        dxs.append(q[1])
    ts = accd_toi_batch("edge-edge", np.array(xs), np.array(dxs), slack=0.1)
    for i in range(len(xs)):
        single = accd_toi(CcdQuery("edge-edge", xs[i], dxs[i], slack=0.1))
        assert ts[i] == single


def test_step_filter_empty_and_separating():
    bodies = [CollisionBody.from_mesh(box_mesh(1.0)) for _ in range(2)]
    q = np.tile(BodyCoords.identity().q, (2, 1))
    q[1, 0] = 2.0
    d_hat = 1e-2
    cands = broad_phase(bodies, q, q, d_hat)
    assert len(cands) == 0
    dq = np.zeros((2, 12))
    assert step_filter(bodies, q, dq, cands) == 1.0
    # separating motion over a near-contact configuration
    q[1, 0] = 1.0 + d_hat / 2
    dq[1, 0] = 0.5
    cands = broad_phase(bodies, q, q + dq, d_hat)
    assert len(cands) > 0
    assert step_filter(bodies, q, dq, cands) == 1.0


def test_step_filter_blocks_tunneling():
    bodies = [CollisionBody.from_mesh(box_mesh(1.0)) for _ in range(2)]
    q = np.tile(BodyCoords.identity().q, (2, 1))
    q[1, 0] = 1.5
    dq = np.zeros((2, 12))
    dq[1, 0] = -2.0  # would pass fully through the first cube
    cands = broad_phase(bodies, q, q + dq, 1e-2)
    alpha = step_filter(bodies, q, dq, cands, slack=0.1)
    assert 0.0 < alpha < 0.3
    # post-step global minimum distance stays positive (brute force)
    q_after = q + alpha * dq
    X = world_positions_all(bodies, q_after)
    tris = bodies[0].triangles
    min_d2 = np.inf
    for bv, bf in ((1, 0), (0, 1)):
        V = X[bv]
        P = np.repeat(V, len(tris), axis=0)
        T = [np.tile(X[bf][tris[:, k]], (len(V), 1)) for k in range(3)]
        d2, _, _ = point_triangle_closest(P, T[0], T[1], T[2])
        min_d2 = min(min_d2, d2.min())
    assert min_d2 > 0.0


def test_trajectories_exactly_linear():
    # position(tau) = x + tau * (dA x_bar + dp) reproduces the affine map
    # at interpolated coordinates, bitwise-equal structure in exact math
    rng = np.random.default_rng(3)
    from stiffbody.body import world_position

    for _ in range(100):
        q0 = rng.normal(size=12)
        dq = rng.normal(size=12)
        x_bar = rng.normal(size=3)
        tau = rng.random()
        x0 = world_position(q0, x_bar)
        dx = world_position(dq, x_bar) - dq[:3] + dq[:3]  # dA x_bar + dp
        lhs = x0 + tau * dx
        rhs = world_position(q0 + tau * dq, x_bar)
        assert np.allclose(lhs, rhs, rtol=0, atol=1e-12)
