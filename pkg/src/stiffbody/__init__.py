"""stiffbody: intersection-free dynamics of stiff 12-DOF affine bodies.

Bodies carry a translation plus a full linear transform, stiffened toward
rotations by an orthogonality potential and coupled through a smoothly
clamped log-barrier contact model with lagged friction. Each implicit time
step minimizes an incremental potential with a projected-Newton solve whose
line search is filtered by conservative-advancement CCD, so accepted
configurations never interpenetrate.
"""
from .aabb import Aabb, aabb_of, aabb_overlap
from .body import (
    BodyCoords,
    BodyMaterial,
    BodyState,
    GeneralizedMass,
    external_generalized_force,
    jacobian,
    mass_matrix,
    ortho_energy,
    ortho_error,
    ortho_gradient,
    ortho_hessian,
    world_position,
)
from .distance import (
    DistanceResult,
    EERegion,
    PTRegion,
    edge_edge_distance_sq,
    point_triangle_distance_sq,
)
from .ccd import CcdQuery, accd_toi, step_filter
from .constraints import (
    Reduction,
    ReparamMap,
    VirtualTet,
    build_constrained_system,
    phi,
    reparam_map,
)
from .contact import (
    CandidateSet,
    CollisionBody,
    ContactPair,
    barrier,
    barrier_d1,
    barrier_d2,
    broad_phase,
    contact_energy,
    contact_gradient_hessian,
    friction_energy,
    friction_precompute,
)
from .intersect import triangles_intersect
from .mesh import SurfaceMesh, build_edges
from .scene import SceneConfig, audit_intersections, load_scene, run
from .solver import (
    SimState,
    StepParams,
    SystemModel,
    advance_step,
    assemble,
    compute_q_tilde,
    ip_value,
    line_search,
    solve_newton_system,
)
from .sparse import BlockSparseMatrix

__all__ = [
    "Aabb",
    "aabb_of",
    "aabb_overlap",
    "BodyCoords",
    "BodyMaterial",
    "BodyState",
    "GeneralizedMass",
    "external_generalized_force",
    "jacobian",
    "mass_matrix",
    "ortho_energy",
    "ortho_error",
    "ortho_gradient",
    "ortho_hessian",
    "world_position",
    "DistanceResult",
    "EERegion",
    "PTRegion",
    "edge_edge_distance_sq",
    "point_triangle_distance_sq",
    "triangles_intersect",
    "SurfaceMesh",
    "build_edges",
    "CcdQuery",
    "accd_toi",
    "step_filter",
    "Reduction",
    "ReparamMap",
    "VirtualTet",
    "build_constrained_system",
    "phi",
    "reparam_map",
    "CandidateSet",
    "CollisionBody",
    "ContactPair",
    "barrier",
    "barrier_d1",
    "barrier_d2",
    "broad_phase",
    "contact_energy",
    "contact_gradient_hessian",
    "friction_energy",
    "friction_precompute",
    "SceneConfig",
    "audit_intersections",
    "load_scene",
    "run",
    "SimState",
    "StepParams",
    "SystemModel",
    "advance_step",
    "assemble",
    "compute_q_tilde",
    "ip_value",
    "line_search",
    "solve_newton_system",
    "BlockSparseMatrix",
]

__version__ = "0.1.0"
