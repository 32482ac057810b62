"""Per-body state, generalized mass, and the stiffening orthogonality energy.

A body's configuration is 12 generalized coordinates q = (p, a1, a2, a3):
a world translation p and the rows a_i of a 3x3 linear transform A. A
material point at rest position x_bar maps to world space as

    x = A x_bar + p = J(x_bar) q,

with J(x_bar) = [I3, I3 kron x_bar^T] constant. Rigidity is not enforced;
instead a stiff polynomial potential penalizes |A A^T - I|_F^2, which keeps
trajectories piecewise linear in the coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import SurfaceMesh

__all__ = [
    "BodyCoords",
    "BodyState",
    "GeneralizedMass",
    "BodyMaterial",
    "world_position",
    "world_positions",
    "jacobian",
    "mass_matrix",
    "ortho_energy",
    "ortho_gradient",
    "ortho_hessian",
    "ortho_error",
    "external_generalized_force",
    "torque_point_forces",
    "project_psd",
]


@dataclass(frozen=True)
class BodyCoords:
    """12 generalized coordinates, stacked (p, a1, a2, a3)."""

    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(12).copy()
        object.__setattr__(self, "q", q)

    @classmethod
    def from_parts(cls, p, A) -> "BodyCoords":
        q = np.empty(12)
        q[:3] = np.asarray(p, dtype=float)
        q[3:] = np.asarray(A, dtype=float).reshape(9)  # row-major: a1, a2, a3
        return cls(q)

    @classmethod
    def identity(cls) -> "BodyCoords":
        return cls.from_parts(np.zeros(3), np.eye(3))

    @property
    def p(self) -> np.ndarray:
        return self.q[:3]

    @property
    def A(self) -> np.ndarray:
        return self.q[3:].reshape(3, 3)


@dataclass
class BodyState:
    """Coordinates plus generalized velocity."""

    q: BodyCoords
    q_dot: np.ndarray = field(default_factory=lambda: np.zeros(12))

    def __post_init__(self):
        self.q_dot = np.asarray(self.q_dot, dtype=float).reshape(12).copy()
        if not (np.all(np.isfinite(self.q.q)) and np.all(np.isfinite(self.q_dot))):
            raise ValueError("non-finite body state")


@dataclass(frozen=True)
class BodyMaterial:
    """density rho, orthogonality stiffness kappa, and body volume nu."""

    density: float
    kappa_ortho: float = 1e11
    volume: float = 1.0

    def __post_init__(self):
        if self.density <= 0 or self.kappa_ortho <= 0 or self.volume <= 0:
            raise ValueError("material parameters must be positive")

    @property
    def stiffness_scale(self) -> float:
        return self.kappa_ortho * self.volume


def _coords(q) -> np.ndarray:
    if isinstance(q, BodyCoords):
        return q.q
    return np.asarray(q, dtype=float).reshape(12)


def world_position(q, x_bar) -> np.ndarray:
    """A x_bar + p for a single material point."""
    qv = _coords(q)
    return qv[3:].reshape(3, 3) @ np.asarray(x_bar, dtype=float) + qv[:3]


def world_positions(q, rest: np.ndarray) -> np.ndarray:
    """Vectorized map of an (N, 3) rest array to world space."""
    qv = _coords(q)
    return rest @ qv[3:].reshape(3, 3).T + qv[:3]


def jacobian(x_bar) -> np.ndarray:
    """The constant 3x12 map with J(x_bar) q = A x_bar + p."""
    x = np.asarray(x_bar, dtype=float)
    J = np.zeros((3, 12))
    J[:, :3] = np.eye(3)
    for i in range(3):
        J[i, 3 + 3 * i : 6 + 3 * i] = x
    return J


# ---------------------------------------------------------------------------
# generalized mass


@dataclass(frozen=True)
class GeneralizedMass:
    """Constant 12x12 mass matrix built from density moments of the solid.

    mass = int rho, first_moment = int rho x_bar, second_moment =
    int rho x_bar x_bar^T over the enclosed volume. The assembled matrix is
    block-structured: mass*I3 up top, I3 kron second_moment on the linear
    block, cross blocks from the first moment.
    """

    mass: float
    first_moment: np.ndarray
    second_moment: np.ndarray
    matrix: np.ndarray

    @classmethod
    def from_moments(cls, mass, first_moment, second_moment) -> "GeneralizedMass":
        m1 = np.asarray(first_moment, dtype=float).reshape(3)
        m2 = np.asarray(second_moment, dtype=float).reshape(3, 3)
        M = np.zeros((12, 12))
        M[:3, :3] = mass * np.eye(3)
        for i in range(3):
            M[i, 3 + 3 * i : 6 + 3 * i] = m1
            M[3 + 3 * i : 6 + 3 * i, i] = m1
            M[3 + 3 * i : 6 + 3 * i, 3 + 3 * i : 6 + 3 * i] = m2
        return cls(float(mass), m1, m2, M)

    def cholesky(self) -> np.ndarray:
        return np.linalg.cholesky(self.matrix)


def _volume_moments(mesh: SurfaceMesh):
    """Exact polynomial moments of the enclosed solid.

    Each surface triangle spans a signed tetrahedron with the origin; the
    signed sums telescope to exact volume integrals for any closed,
    outward-oriented boundary (equivalent to a divergence-theorem surface
    integral, no interior mesh needed). Over a tet with vertices
    {0, v0, v1, v2} and signed volume V:
        int 1        = V
        int x        = V/4 * (v0 + v1 + v2)
        int x x^T    = V/20 * (S S^T + sum v_i v_i^T),  S = v0 + v1 + v2
    """
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    vols = np.einsum("ij,ij->i", v0, np.cross(v1, v2)) / 6.0
    volume = vols.sum()
    s = v0 + v1 + v2
    first = (vols[:, None] * s).sum(axis=0) / 4.0
    outer = (
        np.einsum("ni,nj->nij", s, s)
        + np.einsum("ni,nj->nij", v0, v0)
        + np.einsum("ni,nj->nij", v1, v1)
        + np.einsum("ni,nj->nij", v2, v2)
    )
    second = (vols[:, None, None] * outer).sum(axis=0) / 20.0
    return volume, first, second


def mass_matrix(mesh: SurfaceMesh, density: float):
    """Generalized mass of the solid bounded by `mesh` plus its volume.

    Requires a closed, orientable, outward-oriented mesh and positive
    density. Returns (GeneralizedMass, volume).
    """
    if density <= 0:
        raise ValueError("density must be positive")
    if not mesh.is_closed():
        raise ValueError("mass integration needs a closed, orientable mesh")
    volume, first, second = _volume_moments(mesh)
    if volume <= 0:
        raise ValueError(
            f"non-positive enclosed volume {volume:g}: inverted orientation?"
        )
    gm = GeneralizedMass.from_moments(
        density * volume, density * first, density * second
    )
    # J^T J integrand with rho > 0 makes M SPD; fail loudly if geometry broke that
    np.linalg.cholesky(gm.matrix)
    return gm, float(volume)


# ---------------------------------------------------------------------------
# orthogonality potential
#
# V(q) = k nu (sum_i (a_i.a_i - 1)^2 + sum_{i != j} (a_i.a_j)^2), an
# expanded polynomial form of k nu |A A^T - I|_F^2. The i != j sum runs
# over ordered pairs (6 terms).


def ortho_error(q) -> float:
    """Frobenius deviation |A A^T - I|_F, the monitored rigidity residual."""
    A = _coords(q)[3:].reshape(3, 3)
    return float(np.linalg.norm(A @ A.T - np.eye(3)))


def ortho_energy(q, material: BodyMaterial) -> float:
    A = _coords(q)[3:].reshape(3, 3)
    G = A @ A.T
    diag = np.diag(G) - 1.0
    off = G - np.diag(np.diag(G))
    return material.stiffness_scale * float(np.sum(diag**2) + np.sum(off**2))


def ortho_gradient(q, material: BodyMaterial) -> np.ndarray:
    """Gradient of the orthogonality energy; translation block is zero.

    d/d a_i = 4 k nu ((a_i.a_i - 1) a_i + sum_{j != i} (a_i.a_j) a_j).
    """
    A = _coords(q)[3:].reshape(3, 3)
    G = A @ A.T
    C = G - np.eye(3)
    grad = np.zeros(12)
    grad[3:] = (4.0 * material.stiffness_scale) * (C @ A).reshape(9)
    return grad


def ortho_hessian(q, material: BodyMaterial, project_psd: bool = False) -> np.ndarray:
    """Full 12x12 second derivative of the orthogonality energy.

    Diagonal blocks 4 k nu (2 a_i a_i^T + (a_i.a_i - 1) I + sum_{j!=i} a_j a_j^T),
    cross blocks 4 k nu (a_j a_i^T + (a_i.a_j) I). With project_psd the
    matrix is eigen-decomposed and negative eigenvalues clamp to zero.
    """
    A = _coords(q)[3:].reshape(3, 3)
    s = 4.0 * material.stiffness_scale
    eye = np.eye(3)
    H = np.zeros((12, 12))
    outer = np.einsum("ik,jl->ijkl", A, A)  # outer[i, j] = a_i a_j^T
    sum_outer = outer[0, 0] + outer[1, 1] + outer[2, 2]
    G = A @ A.T
    for i in range(3):
        ri = slice(3 + 3 * i, 6 + 3 * i)
        H[ri, ri] = s * (
            2.0 * outer[i, i]
            + (G[i, i] - 1.0) * eye
            + (sum_outer - outer[i, i])
        )
        for j in range(3):
            if j == i:
                continue
            rj = slice(3 + 3 * j, 6 + 3 * j)
            H[ri, rj] = s * (outer[j, i] + G[i, j] * eye)
    if project_psd:
        H = project_psd_matrix(H)
    return H


def project_psd_matrix(H: np.ndarray) -> np.ndarray:
    """Symmetric eigen-decomposition with negative eigenvalues clamped to 0."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.maximum(w, 0.0)
    return (V * w) @ V.T


def project_psd(H: np.ndarray) -> np.ndarray:
    """Batched PSD projection over a leading axis (or a single matrix)."""
    H = np.asarray(H, dtype=float)
    if H.ndim == 2:
        return project_psd_matrix(H)
    Hs = 0.5 * (H + np.swapaxes(H, -1, -2))
    w, V = np.linalg.eigh(Hs)
    w = np.maximum(w, 0.0)
    return np.einsum("...ik,...k,...jk->...ij", V, w, V)


# ---------------------------------------------------------------------------
# external forces


def external_generalized_force(
    gmass: GeneralizedMass, gravity, point_forces=()
) -> np.ndarray:
    """Generalized force from gravity and point loads.

    Gravity contributes (mass g, g_x m1, g_y m1, g_z m1) with m1 the first
    moment. Each point force f at rest position x_bar adds J(x_bar)^T f =
    (f, f_x x_bar, f_y x_bar, f_z x_bar). Torques are applied upstream as
    antisymmetric point-force pairs.
    """
    g = np.asarray(gravity, dtype=float).reshape(3)
    out = np.zeros(12)
    out[:3] = gmass.mass * g
    for i in range(3):
        out[3 + 3 * i : 6 + 3 * i] = g[i] * gmass.first_moment
    for x_bar, f in point_forces:
        f = np.asarray(f, dtype=float).reshape(3)
        x = np.asarray(x_bar, dtype=float).reshape(3)
        out[:3] += f
        for i in range(3):
            out[3 + 3 * i : 6 + 3 * i] += f[i] * x
    return out


def torque_point_forces(torque, A=None, arm_scale: float = 1.0):
    """A pure world-space torque as an antisymmetric pair of point forces.

    Returns ((x_bar, f), (-x_bar, -f)): material arms pulled back through
    the current transform A so their world positions sit perpendicular to
    the torque, making the applied moment exactly `torque` for any
    invertible A. The translation block of the generalized force cancels.
    """
    tau = np.asarray(torque, dtype=float).reshape(3)
    norm = np.linalg.norm(tau)
    if norm == 0.0:
        z = np.zeros(3)
        return ((z, z), (z, z))
    if A is None:
        A = np.eye(3)
    axis = tau / norm
    helper = np.eye(3)[int(np.argmin(np.abs(axis)))]
    w = np.cross(axis, helper)
    w *= arm_scale / np.linalg.norm(w)
    x_bar = np.linalg.solve(np.asarray(A, dtype=float), w)
    f = 0.5 * np.cross(tau, w) / float(w @ w)
    return ((x_bar, f), (-x_bar, -f))
