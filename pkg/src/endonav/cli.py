"""Command-line entry point: ``endonav {check,plan,replay,sweep}``.

Exit codes: 0 success, 2 validation failure, 3 no path within budget,
4 replay failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import scipy

from .anatomy import (
    MeshError,
    RigidPose,
    points_inside,
    resolution_warnings,
    signed_penetration,
    transform_mesh,
)
from .config import ConfigError, RunConfig, load_config
from .harness import default_grid, replay_plan, robustness_sweep
from .planner import Plan, build_rrt, extract_plan, parse_commands, plan_to_commands, render_commands
from .statics import InfeasibleStartError, solve_equilibrium

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NO_PATH = 3
EXIT_REPLAY = 4

log = logging.getLogger("endonav")


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration (default: bundled arch phantom)")
    common.add_argument("--mesh", type=Path, help="override the anatomy STL path")
    common.add_argument("--seed", type=int, help="planner seed")
    common.add_argument("--budget", type=int, help="planner expansion budget")
    common.add_argument("--epsilon-mm", type=float, help="goal tolerance in mm")
    common.add_argument("--gravity", choices=["on", "off"], help="gravity along -z (9.81 m/s^2) or none")
    common.add_argument("--out-dir", type=Path, help="directory for output files")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="endonav", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("check", parents=[common], help="validate mesh, tools and the start configuration")
    sub.add_parser("plan", parents=[common], help="run the contact-aware RRT and write plan.csv")
    r = sub.add_parser("replay", parents=[common], help="replay a plan, optionally on a moved anatomy")
    r.add_argument("--plan", type=Path, help="plan CSV (default: <out-dir>/plan.csv)")
    r.add_argument("--pose", default="0,0,0", help="anatomy pose a_mm,b_mm,alpha_deg (use --pose=-5,0,0 for negatives)")
    s = sub.add_parser("sweep", parents=[common], help="replay a plan over a grid of anatomy poses")
    s.add_argument("--plan", type=Path, help="plan CSV (default: <out-dir>/plan.csv)")
    s.add_argument("--workers", type=int, help="parallel worker processes (default: all cores)")
    return p


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _validation_failure(errors) -> int:
    _emit({"status": "invalid", "errors": list(errors)})
    return EXIT_VALIDATION


def _load(args):
    overrides = {
        "mesh": args.mesh,
        "seed": args.seed,
        "budget": args.budget,
        "epsilon_mm": args.epsilon_mm,
        "gravity": None if args.gravity is None else args.gravity == "on",
        "out_dir": args.out_dir,
    }
    overrides = {k: (str(v) if isinstance(v, Path) else v) for k, v in overrides.items()}
    cfg = load_config(args.config, overrides)
    mesh = cfg.load_mesh()
    return cfg, mesh


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(cfg: RunConfig, command: str, started: float, outputs: list[Path], extra: dict) -> Path:
    """Record what is needed to rerun ``command``; entries of other commands are kept."""
    path = cfg.output_dir / "manifest.json"
    data = {}
    if path.exists():
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            data = {}
    runs = data.get("runs", {})
    runs[command] = {
        "config_source": cfg.source,
        "config_sha256": cfg.digest(),
        "config": cfg.effective(),
        "seed": cfg.planner.seed,
        "budget": cfg.planner.budget,
        "goal_tolerance_m": cfg.planner.goal_tolerance,
        "gravity_m_s2": list(cfg.gravity),
        "solver": {
            "eq_tol_m": cfg.solver.eq_tol,
            "ineq_tol_m": cfg.solver.ineq_tol,
            "max_outer": cfg.solver.max_outer,
            "max_inner": cfg.solver.max_inner,
        },
        "versions": {
            "endonav": _version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_time_s": round(time.perf_counter() - started, 3),
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
        **extra,
    }
    data["runs"] = runs
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def cmd_check(args) -> int:
    try:
        cfg, mesh = _load(args)
    except ConfigError as exc:
        return _validation_failure(exc.errors)
    except MeshError as exc:
        return _validation_failure([f"mesh: {exc}"] + ([f"boundary edges: {exc.boundary_edges}"] if exc.boundary_edges else []))
    errors = []
    # inward normals: a point just inside each sampled triangle must be inside the volume
    rng = np.random.default_rng(0)
    sample = rng.choice(mesh.triangle_count, size=min(200, mesh.triangle_count), replace=False)
    eps = 1e-3 * float(np.median(mesh.edge_lengths()))
    probes = mesh.centroids[sample] + eps * mesh.normals[sample]
    inward = float(np.mean(points_inside(mesh, probes)))
    if inward < 0.99:
        errors.append(f"normals: only {inward:.0%} of sampled normals point inward")
    warnings = resolution_warnings(mesh, cfg.segment_length)
    # wall distance at the tool origin stands in for the local vessel radius
    radius = float(signed_penetration(mesh, np.zeros(3)))
    if radius > 0 and cfg.segment_length > radius / 4:
        warnings.append(
            f"segment length {cfg.segment_length * 1e3:.3f} mm exceeds a quarter of the vessel "
            f"radius at the origin ({radius * 1e3:.3f} mm); mid-segment penetration may go unseen"
        )
    report = {
        "mesh": mesh.report(),
        "normals_inward_fraction": inward,
        "segment_length_m": cfg.segment_length,
        "origin_wall_distance_m": radius,
        "warnings": warnings,
    }
    try:
        sol = solve_equilibrium(cfg.start.layout(cfg.segment_length), cfg.tools, mesh, None, cfg.gravity, cfg.solver)
        report["start_min_penetration_m"] = sol.penetration_min
        report["start_tip_m"] = [float(c) for c in sol.tip]
        report["start_converged"] = sol.converged
        if not sol.converged:
            errors.append("start: equilibrium did not converge")
    except InfeasibleStartError as exc:
        errors.append(str(exc))
    report["status"] = "ok" if not errors else "invalid"
    report["errors"] = errors
    _emit(report)
    return EXIT_OK if not errors else EXIT_VALIDATION


def cmd_plan(args) -> int:
    started = time.perf_counter()
    try:
        cfg, mesh = _load(args)
    except ConfigError as exc:
        return _validation_failure(exc.errors)
    except MeshError as exc:
        return _validation_failure([f"mesh: {exc}"])
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    try:
        graph = build_rrt(cfg.start, mesh, cfg.tools, cfg.planner, cfg.gravity, cfg.solver)
    except InfeasibleStartError as exc:
        return _validation_failure([str(exc)])
    except ValueError as exc:
        return _validation_failure([f"start: {exc}"])
    graph_path = cfg.output_dir / "graph.json"
    graph_path.write_text(json.dumps(graph.to_json(), indent=1) + "\n")
    outputs = [graph_path]
    summary = {
        "explored_configurations": graph.attempts,
        "vertices": len(graph.vertices),
        "rejected": graph.rejected,
        "goal_found": graph.goal_index is not None,
    }
    if graph.goal_index is not None:
        plan = extract_plan(graph)
        plan_path = cfg.output_dir / "plan.csv"
        plan_path.write_text(render_commands(plan_to_commands(plan, cfg.segment_length)))
        outputs.append(plan_path)
        summary["plan_steps"] = len(plan)
        summary["final_tip_m"] = [float(c) for c in graph.solutions[graph.goal_index].tip]
    _write_manifest(cfg, "plan", started, outputs, {"summary": summary})
    print(f"explored {graph.attempts} configurations, {len(graph.vertices)} vertices in tree")
    _emit(summary)
    return EXIT_OK if graph.goal_index is not None else EXIT_NO_PATH


def _read_plan(cfg: RunConfig, path) -> Plan:
    path = Path(path) if path is not None else cfg.output_dir / "plan.csv"
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"cannot read plan {path}: {exc}") from exc
    return Plan.from_deltas(cfg.start, parse_commands(text, len(cfg.tools)))


def _parse_pose(text: str) -> RigidPose:
    try:
        a, b, alpha = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ValueError(f"pose must be a_mm,b_mm,alpha_deg, got {text!r}") from exc
    return RigidPose(lateral=a * 1e-3, axial=b * 1e-3, rotation_deg=alpha)


def _trajectory_csv(tips) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "x_m", "y_m", "z_m"])
    for k, p in enumerate(tips):
        w.writerow([k] + [repr(float(c)) for c in p])
    return buf.getvalue()


def cmd_replay(args) -> int:
    started = time.perf_counter()
    try:
        cfg, mesh = _load(args)
        plan = _read_plan(cfg, args.plan)
        pose = _parse_pose(args.pose)
    except ConfigError as exc:
        return _validation_failure(exc.errors)
    except (MeshError, ValueError) as exc:
        return _validation_failure([str(exc)])
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    result = replay_plan(plan, transform_mesh(mesh, pose), cfg.tools, cfg.regions.transformed(pose),
                         cfg.gravity, cfg.solver)
    replay_path = cfg.output_dir / "replay.json"
    body = {"pose": {"a_mm": pose.lateral * 1e3, "b_mm": pose.axial * 1e3, "alpha_deg": pose.rotation_deg},
            "units": {"tip": "m"}, **result.to_json()}
    replay_path.write_text(json.dumps(body, indent=1) + "\n")
    traj_path = cfg.output_dir / "trajectory.csv"
    traj_path.write_text(_trajectory_csv(result.tip_trajectory))
    _write_manifest(cfg, "replay", started, [replay_path, traj_path], {"pose": body["pose"]})
    _emit({k: body[k] for k in ("pose", "success", "reached_target", "entered_forbidden", "failure_mode", "failure_step")})
    return EXIT_OK if result.success else EXIT_REPLAY


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    try:
        cfg, mesh = _load(args)
        plan = _read_plan(cfg, args.plan)
    except ConfigError as exc:
        return _validation_failure(exc.errors)
    except (MeshError, ValueError) as exc:
        return _validation_failure([str(exc)])
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    grid = default_grid(cfg.sweep_axes["lateral_mm"], cfg.sweep_axes["axial_mm"], cfg.sweep_axes["rotation_deg"])
    report = robustness_sweep(plan, mesh, cfg.tools, cfg.regions, grid, cfg.gravity, cfg.solver, args.workers)
    csv_path = cfg.output_dir / "sweep.csv"
    csv_path.write_text(report.to_csv())
    json_path = cfg.output_dir / "sweep.json"
    body = report.to_json()
    json_path.write_text(json.dumps(body, indent=1) + "\n")
    _write_manifest(cfg, "sweep", started, [csv_path, json_path], {"envelope": body["envelope"]})
    _emit({"poses": len(grid), "successes": int(sum(r.success for r in report.results)), "envelope": body["envelope"]})
    return EXIT_OK


COMMANDS = {"check": cmd_check, "plan": cmd_plan, "replay": cmd_replay, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
