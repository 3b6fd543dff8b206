"""Navigation planning for telescoping pre-bent endovascular tools."""

from .anatomy import AnatomyMesh, MeshError, RigidPose, load_mesh, nearest_triangle, signed_penetration, transform_mesh
from .harness import RegionSpec, ReplayResult, SweepReport, replay_plan, robustness_sweep, success_rate
from .kinematics import ToolLayout, forward_kinematics, segment_transform, tip_position
from .phantom import BranchPhantom
from .planner import (
    Plan,
    PlanGraph,
    PlannerParams,
    Sphere,
    SystemConfiguration,
    build_rrt,
    extract_plan,
    nearest_vertex,
    plan_to_commands,
    random_configuration,
    steer,
)
from .statics import (
    InfeasibleStartError,
    SolverOptions,
    StaticsSolution,
    ToolSpec,
    anatomy_constraints,
    bending_stiffness,
    energy_gradient,
    potential_energy,
    solve_equilibrium,
    telescoping_constraints,
)

__all__ = [name for name in dir() if not name.startswith("_")]
