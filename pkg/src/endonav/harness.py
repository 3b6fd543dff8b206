"""Open-loop replay of a command plan, and robustness to rigid anatomy misplacement.

The tools stay fixed at the origin while the anatomy (and the target and
forbidden regions attached to it) is moved by a :class:`RigidPose`.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .anatomy import AnatomyMesh, RigidPose, transform_mesh
from .planner import Plan, Sphere, remap_warm_start
from .statics import InfeasibleStartError, SolverOptions, ToolSpec, solve_equilibrium

DEFAULT_LATERAL_MM = (-10.0, -7.5, -5.0, -2.5, 0.0, 2.5, 5.0, 7.5, 10.0)
DEFAULT_AXIAL_MM = DEFAULT_LATERAL_MM
DEFAULT_ROTATION_DEG = (-10.0, -5.0, 0.0, 5.0, 10.0)


@dataclass(frozen=True)
class RegionSpec:
    target: Sphere
    forbidden: tuple[Sphere, ...] = ()

    def transformed(self, pose: RigidPose) -> "RegionSpec":
        if pose.is_identity:
            return self

        def move(s):
            return Sphere(tuple(pose.apply(np.asarray(s.center))), s.radius)

        return RegionSpec(move(self.target), tuple(move(s) for s in self.forbidden))


@dataclass
class ReplayResult:
    success: bool
    reached_target: bool
    entered_forbidden: bool
    tip_trajectory: np.ndarray
    failure_step: Optional[int] = None
    failure_mode: str = "none"
    converged: list[bool] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "success": self.success,
            "reached_target": self.reached_target,
            "entered_forbidden": self.entered_forbidden,
            "failure_step": self.failure_step,
            "failure_mode": self.failure_mode,
            "tip_trajectory_m": [[float(c) for c in p] for p in self.tip_trajectory],
            "converged": list(self.converged),
        }


def replay_plan(
    plan: Plan,
    mesh: AnatomyMesh,
    specs: Sequence[ToolSpec],
    regions: RegionSpec,
    gravity=(0.0, 0.0, 0.0),
    options: SolverOptions = SolverOptions(),
) -> ReplayResult:
    """Solve the equilibrium at every configuration of ``plan`` in order.

    Each solve is warm-started from the previous one, exactly as the planner
    warm-started each vertex from its parent, so replaying on the planning
    mesh reproduces the planned tip path bit for bit. A non-converged step is
    recorded as the failure step but the replay continues from it.
    """
    n = len(plan.configurations)
    l = specs[0].segment_length
    tips = np.full((n, 3), np.nan)
    converged = []
    failure_step = None
    mode = "none"
    warm = None
    for k, config in enumerate(plan.configurations):
        if warm is not None:
            warm = remap_warm_start(warm, config.inserted)
        try:
            sol = solve_equilibrium(config.layout(l), specs, mesh, warm, gravity, options)
        except InfeasibleStartError:
            return ReplayResult(False, False, False, tips, 0, "infeasible_start", [False] * n)
        tips[k] = sol.tip
        converged.append(sol.converged)
        if not sol.converged and failure_step is None:
            failure_step = k
            mode = "not_converged"
        warm = sol.gammas
    entered = any(s.contains(p) for p in tips for s in regions.forbidden)
    reached = regions.target.contains(tips[-1])
    success = reached and not entered and failure_step is None
    if mode == "none" and not success:
        mode = "entered_forbidden" if entered else "missed_target"
    return ReplayResult(success, reached, entered, tips, failure_step, mode, converged)


@dataclass
class SweepReport:
    poses: list[RigidPose]
    results: list[ReplayResult]

    def envelope(self) -> dict[str, Optional[tuple[float, float]]]:
        """Largest contiguous successful interval around zero along each axis.

        Only poses that vary a single axis are used; ``None`` means the nominal
        pose itself failed or was not in the grid.
        """
        nominal = [r.success for p, r in zip(self.poses, self.results) if p.is_identity]
        out: dict[str, Optional[tuple[float, float]]] = {}
        for axis in ("lateral", "axial", "rotation_deg"):
            if not nominal or not nominal[0]:
                out[axis] = None
                continue
            others = [a for a in ("lateral", "axial", "rotation_deg") if a != axis]
            pts = sorted(
                (getattr(p, axis), r.success)
                for p, r in zip(self.poses, self.results)
                if all(getattr(p, o) == 0 for o in others)
            )
            values = [v for v, _ in pts]
            ok = [s for _, s in pts]
            i0 = values.index(0.0)
            lo = i0
            while lo > 0 and ok[lo - 1]:
                lo -= 1
            hi = i0
            while hi < len(ok) - 1 and ok[hi + 1]:
                hi += 1
            out[axis] = (values[lo], values[hi])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a_mm", "b_mm", "alpha_deg", "success", "reached_target", "entered_forbidden",
                    "failure_mode", "failure_step"])
        for p, r in zip(self.poses, self.results):
            w.writerow([repr(p.lateral * 1e3), repr(p.axial * 1e3), repr(p.rotation_deg), int(r.success),
                        int(r.reached_target), int(r.entered_forbidden), r.failure_mode,
                        "" if r.failure_step is None else r.failure_step])
        return buf.getvalue()

    def to_json(self) -> dict:
        env = self.envelope()
        return {
            "units": {"a": "mm", "b": "mm", "alpha": "deg", "tip": "m"},
            "envelope": {
                "a_mm": None if env["lateral"] is None else [v * 1e3 for v in env["lateral"]],
                "b_mm": None if env["axial"] is None else [v * 1e3 for v in env["axial"]],
                "alpha_deg": None if env["rotation_deg"] is None else list(env["rotation_deg"]),
            },
            "poses": [
                {"a_mm": p.lateral * 1e3, "b_mm": p.axial * 1e3, "alpha_deg": p.rotation_deg, **r.to_json()}
                for p, r in zip(self.poses, self.results)
            ],
        }


def default_grid(lateral_mm=DEFAULT_LATERAL_MM, axial_mm=DEFAULT_AXIAL_MM,
                 rotation_deg=DEFAULT_ROTATION_DEG) -> list[RigidPose]:
    """One axis varied at a time; the nominal pose appears once, first."""
    grid = [RigidPose()]
    grid += [RigidPose(lateral=a * 1e-3) for a in lateral_mm if a != 0]
    grid += [RigidPose(axial=b * 1e-3) for b in axial_mm if b != 0]
    grid += [RigidPose(rotation_deg=r) for r in rotation_deg if r != 0]
    return grid


# worker state for process pools; set once per process by _init_worker
_WORK: dict = {}


def _init_worker(plan, mesh, specs, regions, gravity, options):
    _WORK.update(plan=plan, mesh=mesh, specs=specs, regions=regions, gravity=gravity, options=options)


def _replay_pose(pose: RigidPose) -> ReplayResult:
    w = _WORK
    return replay_plan(w["plan"], transform_mesh(w["mesh"], pose), w["specs"],
                       w["regions"].transformed(pose), w["gravity"], w["options"])


def robustness_sweep(
    plan: Plan,
    mesh: AnatomyMesh,
    specs: Sequence[ToolSpec],
    regions: RegionSpec,
    grid: Sequence[RigidPose],
    gravity=(0.0, 0.0, 0.0),
    options: SolverOptions = SolverOptions(),
    workers: Optional[int] = None,
) -> SweepReport:
    """Replay ``plan`` on the anatomy moved to every pose of ``grid``."""
    grid = list(grid)
    if not grid:
        raise ValueError("pose grid is empty")
    workers = (os.cpu_count() or 1) if workers is None else max(1, int(workers))
    args = (plan, mesh, specs, regions, tuple(gravity), options)
    if workers == 1 or len(grid) == 1:
        _init_worker(*args)
        results = [_replay_pose(p) for p in grid]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=args) as pool:
            results = list(pool.map(_replay_pose, grid))
    return SweepReport(grid, results)


def success_rate(
    plan: Plan,
    mesh: AnatomyMesh,
    specs: Sequence[ToolSpec],
    regions: RegionSpec,
    trials: int,
    noise: Optional[tuple[float, float, float]] = None,
    seed: int = 0,
    gravity=(0.0, 0.0, 0.0),
    options: SolverOptions = SolverOptions(),
) -> float:
    """Fraction of successful replays.

    ``noise`` gives standard deviations ``(a [m], b [m], alpha [deg])`` of a
    random pose drawn per trial; without it every trial uses the nominal mesh.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    wins = 0
    for _ in range(trials):
        if noise is None:
            pose = RigidPose()
        else:
            a, b, r = rng.normal(0.0, noise)
            pose = RigidPose(lateral=a, axial=b, rotation_deg=r)
        res = replay_plan(plan, transform_mesh(mesh, pose), specs, regions.transformed(pose), gravity, options)
        wins += res.success
    return wins / trials
