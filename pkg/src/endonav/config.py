"""Run configuration: one YAML file plus command-line overrides.

Schema (SI units unless the key says otherwise)::

    mesh:
      path: anatomy.stl          # relative to the config file, or
      phantom: {}                # BranchPhantom fields (mm) to generate one
      units_scale: 0.001         # file units -> meters (path only)
    tools:                       # innermost first
      - name: guidewire
        diameter_m: 0.000889
        youngs_modulus_pa: 7.0e10
        poisson_ratio: 0.33
        mass_per_length_kg_m: 0.0
        segment_length_m: 0.00125
        max_segments: 90
        tip_prebend: [[gx, gy, gz], ...]   # distal segments, tip last
    start: {inserted: [10, 10], rotation_deg: [0, 0]}
    target_m: [x, y, z]
    planner:
      goal_tolerance_m: 0.002
      budget: 100
      seed: 0
      step_segments: [1, 1]
      step_rotation_deg: [5, 5]
      goal_bias: 0.1
    regions:
      target: {center_m: [x, y, z], radius_m: r}
      forbidden: [{center_m: [x, y, z], radius_m: r}]
    solver: {eq_tol_m: 1.0e-6, ineq_tol_m: 1.0e-4, max_outer: 500, max_inner: 200}
    gravity_m_s2: [0, 0, 0]
    sweep: {lateral_mm: [...], axial_mm: [...], rotation_deg: [...]}
    output_dir: out
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .anatomy import AnatomyMesh, load_mesh
from .harness import DEFAULT_AXIAL_MM, DEFAULT_LATERAL_MM, DEFAULT_ROTATION_DEG, RegionSpec
from .phantom import BranchPhantom
from .planner import PlannerParams, Sphere, SystemConfiguration
from .statics import SolverOptions, ToolSpec

GRAVITY = (0.0, 0.0, -9.81)
BUNDLED = "arch_phantom.yaml"


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class RunConfig:
    source: str
    raw: dict
    tools: list[ToolSpec]
    start: SystemConfiguration
    planner: PlannerParams
    regions: RegionSpec
    solver: SolverOptions
    gravity: tuple[float, float, float]
    sweep_axes: dict
    output_dir: Path
    mesh_path: Optional[Path] = None
    mesh_units: float = 1e-3
    phantom: Optional[BranchPhantom] = None
    overrides: dict = field(default_factory=dict)

    @property
    def segment_length(self) -> float:
        return self.tools[0].segment_length

    def load_mesh(self) -> AnatomyMesh:
        if self.mesh_path is not None:
            return load_mesh(self.mesh_path, self.mesh_units, self.segment_length)
        return self.phantom.mesh()

    def digest(self) -> str:
        """Hash of the effective inputs (config after overrides, mesh bytes)."""
        h = hashlib.sha256(json.dumps(self.effective(), sort_keys=True).encode())
        if self.mesh_path is not None:
            h.update(self.mesh_path.read_bytes())
        return h.hexdigest()

    def effective(self) -> dict:
        out = json.loads(json.dumps(self.raw))
        out["overrides"] = dict(self.overrides)
        return out


def bundled_config_path() -> Path:
    return Path(str(resources.files("endonav") / "data" / BUNDLED))


def _vec(value, n, name, errors):
    try:
        arr = np.asarray(value, dtype=float).reshape(n)
    except (TypeError, ValueError):
        errors.append(f"{name}: expected {n} numbers")
        return None
    if not np.all(np.isfinite(arr)):
        errors.append(f"{name}: values must be finite")
        return None
    return arr


def _tool(entry: dict, index: int, errors) -> Optional[ToolSpec]:
    required = ["diameter_m", "youngs_modulus_pa", "segment_length_m", "max_segments"]
    missing = [k for k in required if k not in entry]
    if missing:
        errors.append(f"tools[{index}]: missing {', '.join(missing)}")
        return None
    try:
        return ToolSpec(
            name=str(entry.get("name", f"tool{index}")),
            outer_diameter=float(entry["diameter_m"]),
            youngs_modulus=float(entry["youngs_modulus_pa"]),
            poisson_ratio=float(entry.get("poisson_ratio", 0.33)),
            mass_per_length=float(entry.get("mass_per_length_kg_m", 0.0)),
            segment_length=float(entry["segment_length_m"]),
            max_segments=int(entry["max_segments"]),
            tip_prebend=np.asarray(entry.get("tip_prebend", []), dtype=float).reshape(-1, 3),
        )
    except (TypeError, ValueError) as exc:
        errors.append(f"tools[{index}]: {exc}")
        return None


def _sphere(entry, name, errors) -> Optional[Sphere]:
    if not isinstance(entry, dict):
        errors.append(f"{name}: expected a mapping with center_m and radius_m")
        return None
    c = _vec(entry.get("center_m"), 3, f"{name}.center_m", errors)
    try:
        r = float(entry.get("radius_m"))
    except (TypeError, ValueError):
        errors.append(f"{name}.radius_m: expected a number")
        return None
    if c is None:
        return None
    if not r > 0:
        errors.append(f"{name}.radius_m must be positive")
        return None
    return Sphere(tuple(c), r)


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Parse and validate a config file (the bundled phantom config by default).

    ``overrides`` may hold ``mesh``, ``seed``, ``budget``, ``epsilon_mm``,
    ``gravity`` (bool) and ``out_dir``.
    """
    path = bundled_config_path() if path is None else Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"config {path} is not valid YAML: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"config {path} must be a mapping"])
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    errors: list[str] = []
    base = path.parent

    mesh_cfg = raw.get("mesh") or {}
    mesh_path = None
    phantom = None
    units = float(mesh_cfg.get("units_scale", 1e-3))
    if "mesh" in overrides:
        mesh_path = Path(overrides["mesh"])
    elif "path" in mesh_cfg:
        mesh_path = Path(mesh_cfg["path"])
        if not mesh_path.is_absolute():
            mesh_path = base / mesh_path
    elif "phantom" in mesh_cfg:
        try:
            phantom = BranchPhantom(**(mesh_cfg["phantom"] or {}))
        except TypeError as exc:
            errors.append(f"mesh.phantom: {exc}")
    else:
        errors.append("mesh: give either path or phantom")
    if mesh_path is not None and not mesh_path.is_file():
        errors.append(f"mesh file not found: {mesh_path}")

    tools_cfg = raw.get("tools") or []
    if not tools_cfg:
        errors.append("tools: at least one tool is required")
    tools = [_tool(t, i, errors) for i, t in enumerate(tools_cfg)]
    if tools and all(t is not None for t in tools):
        if len({t.segment_length for t in tools}) != 1:
            errors.append("tools: all tools must share one segment_length_m")

    n = len(tools_cfg)
    start_cfg = raw.get("start") or {}
    start = None
    try:
        ins = [int(v) for v in start_cfg.get("inserted", [])]
        rot = [float(np.deg2rad(float(v))) for v in start_cfg.get("rotation_deg", [0.0] * n)]
        if len(ins) != n or len(rot) != n:
            errors.append("start: inserted and rotation_deg need one entry per tool")
        else:
            start = SystemConfiguration(tuple(ins), tuple(rot))
            for j, t in enumerate(tools):
                if t is not None and ins[j] > t.max_segments:
                    errors.append(f"start: tool {j} inserted beyond max_segments")
    except (TypeError, ValueError) as exc:
        errors.append(f"start: {exc}")

    target = _vec(raw.get("target_m"), 3, "target_m", errors)
    pl = raw.get("planner") or {}
    eps = float(overrides["epsilon_mm"]) * 1e-3 if "epsilon_mm" in overrides else float(pl.get("goal_tolerance_m", 2e-3))

    reg = raw.get("regions") or {}
    tgt_region = _sphere(reg.get("target"), "regions.target", errors) if "target" in reg else None
    if tgt_region is None and "target" not in reg and target is not None:
        tgt_region = Sphere(tuple(target), eps)
    forbidden = [_sphere(f, f"regions.forbidden[{i}]", errors) for i, f in enumerate(reg.get("forbidden") or [])]

    planner = None
    if target is not None:
        try:
            planner = PlannerParams(
                target=tuple(target),
                goal_tolerance=eps,
                step_segments=tuple(pl.get("step_segments", [1] * n)),
                step_rotation=tuple(float(np.deg2rad(v)) for v in pl.get("step_rotation_deg", [5.0] * n)),
                budget=int(overrides.get("budget", pl.get("budget", 100))),
                seed=int(overrides.get("seed", pl.get("seed", 0))),
                goal_bias=float(pl.get("goal_bias", 0.1)),
                forbidden=tuple(f for f in forbidden if f is not None),
            )
        except (TypeError, ValueError) as exc:
            errors.append(f"planner: {exc}")
        if planner is not None and len(planner.step_segments) != n:
            errors.append("planner: step limits need one entry per tool")

    sv = raw.get("solver") or {}
    try:
        solver = SolverOptions(
            eq_tol=float(sv.get("eq_tol_m", 1e-6)),
            ineq_tol=float(sv.get("ineq_tol_m", 1e-4)),
            max_outer=int(sv.get("max_outer", 500)),
            max_inner=int(sv.get("max_inner", 200)),
        )
    except (TypeError, ValueError) as exc:
        errors.append(f"solver: {exc}")
        solver = SolverOptions()

    gravity = raw.get("gravity_m_s2", [0.0, 0.0, 0.0])
    if "gravity" in overrides:
        gravity = GRAVITY if overrides["gravity"] else (0.0, 0.0, 0.0)
    g = _vec(gravity, 3, "gravity_m_s2", errors)

    sw = raw.get("sweep") or {}
    sweep_axes = {
        "lateral_mm": [float(v) for v in sw.get("lateral_mm", DEFAULT_LATERAL_MM)],
        "axial_mm": [float(v) for v in sw.get("axial_mm", DEFAULT_AXIAL_MM)],
        "rotation_deg": [float(v) for v in sw.get("rotation_deg", DEFAULT_ROTATION_DEG)],
    }
    out_dir = Path(overrides.get("out_dir", raw.get("output_dir", "out")))

    if errors:
        raise ConfigError(errors)
    if tgt_region.radius < planner.goal_tolerance:
        # a goal hit must imply a target-region hit for replay to agree with planning
        errors.append("regions.target radius must be at least the goal tolerance")
    if not np.allclose(tgt_region.center, planner.target):
        errors.append("regions.target center must equal target_m")
    if errors:
        raise ConfigError(errors)
    return RunConfig(
        source=str(path),
        raw=raw,
        tools=tools,
        start=start,
        planner=planner,
        regions=RegionSpec(tgt_region, tuple(f for f in forbidden if f is not None)),
        solver=solver,
        gravity=tuple(float(v) for v in g),
        sweep_axes=sweep_axes,
        output_dir=out_dir,
        mesh_path=mesh_path,
        mesh_units=units,
        phantom=phantom,
        overrides=overrides,
    )
