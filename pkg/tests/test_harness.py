import numpy as np
import pytest

from endonav.anatomy import RigidPose, transform_mesh
from endonav.harness import (
    RegionSpec,
    ReplayResult,
    SweepReport,
    default_grid,
    replay_plan,
    robustness_sweep,
    success_rate,
)
from endonav.planner import Plan, PlannerParams, Sphere, SystemConfiguration, build_rrt, extract_plan
from endonav.statics import ToolSpec

from conftest import L

WIRE = [ToolSpec("wire", 0.889e-3, 70e9, 0.33, 0.0, L, 40)]
START = SystemConfiguration((4,), (0.0,))
GOAL = (0.0, 0.0, 16 * L)


@pytest.fixture(scope="module")
def tube_plan(tube):
    params = PlannerParams(GOAL, goal_tolerance=0.2 * L, budget=80, seed=4, goal_bias=0.3)
    graph = build_rrt(START, tube, WIRE, params)
    return graph, extract_plan(graph)


def regions(radius=0.5e-3, forbidden=()):
    return RegionSpec(Sphere(GOAL, radius), tuple(forbidden))


def test_replay_reproduces_planned_tips(tube, tube_plan):
    graph, plan = tube_plan
    res = replay_plan(plan, tube, WIRE, regions())
    assert res.success and res.failure_mode == "none" and res.failure_step is None
    path = [graph.goal_index]
    while graph.parents[path[-1]] >= 0:
        path.append(graph.parents[path[-1]])
    planned = np.array([graph.solutions[i].tip for i in reversed(path)])
    assert np.array_equal(res.tip_trajectory, planned)
    assert all(res.converged) and len(res.converged) == len(plan) + 1


def test_empty_plan_at_target(tube):
    plan = Plan([SystemConfiguration((16,), (0.0,))], [])
    res = replay_plan(plan, tube, WIRE, regions())
    assert res.success and res.tip_trajectory.shape == (1, 3)


def test_forbidden_start(tube, tube_plan):
    _, plan = tube_plan
    ban = Sphere((0.0, 0.0, 4 * L), 1e-3)
    res = replay_plan(plan, tube, WIRE, regions(forbidden=[ban]))
    assert res.entered_forbidden and not res.success
    assert res.failure_mode == "entered_forbidden"
    assert ban.contains(res.tip_trajectory[0])


def test_missed_target_when_anatomy_moves(tube, tube_plan):
    _, plan = tube_plan
    pose = RigidPose(lateral=5e-3)
    res = replay_plan(plan, transform_mesh(tube, pose), WIRE, regions().transformed(pose))
    assert not res.success and res.failure_mode == "missed_target"


def test_gross_misalignment_is_infeasible(tube, tube_plan):
    _, plan = tube_plan
    pose = RigidPose(lateral=0.1)
    res = replay_plan(plan, transform_mesh(tube, pose), WIRE, regions().transformed(pose))
    assert not res.success and res.failure_mode == "infeasible_start"


def test_regions_follow_the_pose():
    spec = regions(forbidden=[Sphere((1e-3, 0, 0), 1e-3)])
    pose = RigidPose(lateral=2e-3, axial=-1e-3, rotation_deg=10)
    moved = spec.transformed(pose)
    assert np.allclose(moved.target.center, pose.apply(np.array(GOAL)))
    assert np.allclose(moved.forbidden[0].center, pose.apply(np.array([1e-3, 0, 0])))
    assert moved.target.radius == spec.target.radius
    assert spec.transformed(RigidPose()) is spec


def test_default_grid():
    grid = default_grid()
    assert grid[0].is_identity and len(grid) == 1 + 8 + 8 + 4
    assert sum(p.is_identity for p in grid) == 1


def fake(success):
    return ReplayResult(success, success, False, np.zeros((1, 3)))


def test_envelope_is_contiguous_around_nominal():
    a = [-10, -5, -2.5, 0, 2.5, 5, 10]
    ok = [True, False, True, True, True, False, True]
    poses = [RigidPose(lateral=v * 1e-3) for v in a]
    report = SweepReport(poses, [fake(s) for s in ok])
    env = report.envelope()
    assert env["lateral"] == pytest.approx((-2.5e-3, 2.5e-3))
    # only the nominal pose sits on the other axes
    assert env["axial"] == (0.0, 0.0) and env["rotation_deg"] == (0.0, 0.0)
    assert SweepReport([RigidPose()], [fake(False)]).envelope()["lateral"] is None


def test_identity_sweep_matches_replay(tube, tube_plan):
    _, plan = tube_plan
    rep = robustness_sweep(plan, tube, WIRE, regions(), [RigidPose()], workers=1)
    single = replay_plan(plan, tube, WIRE, regions())
    assert rep.results[0].success == single.success
    assert np.array_equal(rep.results[0].tip_trajectory, single.tip_trajectory)
    assert rep.envelope() == {"lateral": (0.0, 0.0), "axial": (0.0, 0.0), "rotation_deg": (0.0, 0.0)}


def test_parallel_sweep_is_order_stable(tube, tube_plan):
    _, plan = tube_plan
    grid = [RigidPose(), RigidPose(lateral=5e-3), RigidPose(axial=1e-3), RigidPose(rotation_deg=5)]
    serial = robustness_sweep(plan, tube, WIRE, regions(), grid, workers=1)
    pooled = robustness_sweep(plan, tube, WIRE, regions(), grid, workers=2)
    assert [r.success for r in serial.results] == [r.success for r in pooled.results]
    assert all(np.array_equal(a.tip_trajectory, b.tip_trajectory)
               for a, b in zip(serial.results, pooled.results))
    lines = serial.to_csv().splitlines()
    assert lines[0].startswith("a_mm,b_mm,alpha_deg,success")
    assert len(lines) == 5
    assert serial.to_json()["poses"][1]["failure_mode"] == "missed_target"
    with pytest.raises(ValueError):
        robustness_sweep(plan, tube, WIRE, regions(), [], workers=1)


def test_success_rate(tube, tube_plan):
    _, plan = tube_plan
    assert success_rate(plan, tube, WIRE, regions(), 5) == 1.0
    # straight insertion along the axis: axial shifts below the target radius still succeed
    assert success_rate(plan, tube, WIRE, regions(), 5, noise=(0.0, 1e-4, 0.0), seed=2) == 1.0
    assert success_rate(plan, tube, WIRE, regions(), 1, noise=(0.05, 0.0, 0.0), seed=0) == 0.0
    with pytest.raises(ValueError):
        success_rate(plan, tube, WIRE, regions(), 0)
