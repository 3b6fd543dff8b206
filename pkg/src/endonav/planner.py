"""Contact-aware RRT over insertion counts and base rotations.

The control state of ``N`` telescoping tools is ``V = {(M_j, theta_j)}``.
The tree only keeps configurations whose constrained equilibrium converged,
so every stored state is inside the anatomy or resting on its wall.
"""

from __future__ import annotations

import csv
import heapq
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .anatomy import AnatomyMesh
from .kinematics import ToolLayout
from .statics import SolverOptions, StaticsSolution, ToolSpec, solve_equilibrium

log = logging.getLogger(__name__)


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True)
class SystemConfiguration:
    """Inserted segment count and base rotation (radians) per tool, innermost first."""

    inserted: tuple[int, ...]
    rotations: tuple[float, ...]

    def __post_init__(self):
        ins = tuple(int(m) for m in self.inserted)
        rot = tuple(float(t) for t in self.rotations)
        if len(ins) != len(rot):
            raise ValueError("one insertion count and one rotation per tool")
        if any(m < 0 for m in ins):
            raise ValueError("insertion counts must be non-negative")
        object.__setattr__(self, "inserted", ins)
        object.__setattr__(self, "rotations", rot)

    @property
    def tool_count(self) -> int:
        return len(self.inserted)

    def layout(self, segment_length: float) -> ToolLayout:
        return ToolLayout(self.inserted, segment_length, self.rotations)

    def key(self) -> tuple:
        return self.inserted + tuple(round(t, 9) for t in self.rotations)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        c = tuple(float(v) for v in np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def contains(self, point) -> bool:
        return bool(np.linalg.norm(np.asarray(point) - np.asarray(self.center)) <= self.radius)


@dataclass(frozen=True)
class PlannerParams:
    target: tuple[float, float, float]
    goal_tolerance: float = 2e-3
    step_segments: tuple[int, ...] = (1,)
    step_rotation: tuple[float, ...] = (np.deg2rad(5.0),)
    budget: int = 100
    seed: int = 0
    # nearest-vertex weights per tool; None means w_M = 1 and w_theta = (dM / dtheta)^2
    weight_segments: Optional[tuple[float, ...]] = None
    weight_rotation: Optional[tuple[float, ...]] = None
    # probability of a greedy expansion toward the target; 0 gives the plain RRT
    goal_bias: float = 0.1
    # tip positions inside these spheres are not admitted to the tree
    forbidden: tuple[Sphere, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(float(v) for v in np.asarray(self.target).reshape(3)))
        object.__setattr__(self, "step_segments", tuple(int(v) for v in self.step_segments))
        object.__setattr__(self, "step_rotation", tuple(float(v) for v in self.step_rotation))
        object.__setattr__(self, "forbidden", tuple(self.forbidden))
        if not np.all(np.isfinite(self.target)):
            raise ValueError("target must be finite")
        if not self.goal_tolerance > 0:
            raise ValueError("goal tolerance must be positive")
        if len(self.step_segments) != len(self.step_rotation):
            raise ValueError("step limits need one entry per tool")
        if any(m < 1 for m in self.step_segments) or any(not t > 0 for t in self.step_rotation):
            raise ValueError("step limits must be positive (at least one segment)")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal bias is a probability")

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        dm = np.asarray(self.step_segments, dtype=float)
        dt = np.asarray(self.step_rotation, dtype=float)
        wm = np.ones_like(dm) if self.weight_segments is None else np.asarray(self.weight_segments, float)
        wt = (dm / dt) ** 2 if self.weight_rotation is None else np.asarray(self.weight_rotation, float)
        if np.any(wm <= 0) or np.any(wt <= 0):
            raise ValueError("nearest-vertex weights must be positive")
        return wm, wt


@dataclass
class PlanGraph:
    vertices: list[SystemConfiguration]
    solutions: list[StaticsSolution]
    parents: list[int]
    # per-vertex command that produced it from its parent: (delta M, delta theta)
    steps: list[tuple[tuple[int, ...], tuple[float, ...]]]
    start_index: int = 0
    goal_index: Optional[int] = None
    attempts: int = 0
    rejected: dict = field(default_factory=lambda: {"duplicate": 0, "not_converged": 0, "forbidden": 0})

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(p, i) for i, p in enumerate(self.parents) if p >= 0]

    def tips(self) -> np.ndarray:
        return np.array([s.tip for s in self.solutions])

    def to_json(self) -> dict:
        return {
            "units": {"tip": "m", "rotation": "rad"},
            "start_index": self.start_index,
            "goal_index": self.goal_index,
            "attempts": self.attempts,
            "rejected": dict(self.rejected),
            "vertices": [
                {
                    "index": i,
                    "inserted": list(v.inserted),
                    "rotation_rad": list(v.rotations),
                    "tip_m": [float(c) for c in s.tip],
                    "potential_energy_j": s.potential_energy,
                    "penetration_min_m": s.penetration_min,
                }
                for i, (v, s) in enumerate(zip(self.vertices, self.solutions))
            ],
            "edges": [list(e) for e in self.edges],
        }


@dataclass
class Plan:
    configurations: list[SystemConfiguration]
    deltas: list[tuple[tuple[int, ...], tuple[float, ...]]]

    def __len__(self) -> int:
        return len(self.deltas)

    @property
    def start(self) -> SystemConfiguration:
        return self.configurations[0]

    @classmethod
    def from_deltas(cls, start: SystemConfiguration, deltas) -> "Plan":
        configs = [start]
        for dm, dt in deltas:
            configs.append(apply_delta(configs[-1], dm, dt))
        return cls(configs, [(tuple(int(m) for m in dm), tuple(float(t) for t in dt)) for dm, dt in deltas])


@dataclass(frozen=True)
class Command:
    step: int
    tool: int
    delta_segments: int
    delta_length: float
    delta_rotation: float


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


def apply_delta(config: SystemConfiguration, dm, dt) -> SystemConfiguration:
    return SystemConfiguration(
        tuple(m + int(d) for m, d in zip(config.inserted, dm)),
        tuple(t + float(d) for t, d in zip(config.rotations, dt)),
    )


def random_configuration(max_segments: Sequence[int], rng: np.random.Generator) -> SystemConfiguration:
    """Uniform integer insertion in ``[0, max]`` and rotation in ``[-pi, pi)`` per tool."""
    hi = np.asarray(max_segments, dtype=np.int64)
    m = rng.integers(0, hi + 1)
    t = rng.uniform(-np.pi, np.pi, size=len(hi))
    return SystemConfiguration(tuple(m), tuple(t))


def nearest_vertex(vertices: Sequence[SystemConfiguration], query: SystemConfiguration, weights) -> int:
    """Index minimizing the weighted squared distance; ties go to the lowest index."""
    if not vertices:
        raise ValueError("empty graph")
    wm, wt = weights
    m = np.array([v.inserted for v in vertices], dtype=float)
    t = np.array([v.rotations for v in vertices], dtype=float)
    dm = m - np.asarray(query.inserted, dtype=float)
    dt = wrap_angle(t - np.asarray(query.rotations, dtype=float))
    cost = (dm * dm) @ np.asarray(wm) + (dt * dt) @ np.asarray(wt)
    return int(np.argmin(cost))


def steer_delta(near: SystemConfiguration, rand: SystemConfiguration, step_segments, step_rotation,
                max_segments):
    """Per-coordinate move from ``near`` toward ``rand``, saturating at ``rand``."""
    dm = []
    for m, r, s, hi in zip(near.inserted, rand.inserted, step_segments, max_segments):
        target = min(max(r, 0), hi)
        d = target - m
        dm.append(int(np.sign(d)) * min(abs(d), int(s)))
    dt = []
    for t, r, s in zip(near.rotations, rand.rotations, step_rotation):
        d = float(wrap_angle(r - t))
        dt.append(float(np.sign(d)) * min(abs(d), float(s)))
    return tuple(dm), tuple(dt)


def steer(near: SystemConfiguration, rand: SystemConfiguration, step_segments, step_rotation,
          max_segments) -> SystemConfiguration:
    dm, dt = steer_delta(near, rand, step_segments, step_rotation, max_segments)
    return apply_delta(near, dm, dt)


def remap_warm_start(gammas: Sequence[np.ndarray], inserted: Sequence[int]) -> list[np.ndarray]:
    """Carry a bending stack over to new insertion counts.

    Inserting pushes the existing shape distally, so new proximal segments
    copy the current most proximal one; retracting drops proximal segments.
    """
    out = []
    for g, m in zip(gammas, inserted):
        g = np.asarray(g, dtype=float).reshape(-1, 3)
        extra = m - len(g)
        if extra > 0:
            seed = g[:1] if len(g) else np.zeros((1, 3))
            g = np.vstack([np.repeat(seed, extra, axis=0), g])
        elif extra < 0:
            g = g[-extra:]
        out.append(g.copy())
    return out


def solve_configuration(config, mesh, specs, warm=None, gravity=(0.0, 0.0, 0.0),
                        options: SolverOptions = SolverOptions()) -> StaticsSolution:
    layout = config.layout(specs[0].segment_length)
    if warm is not None:
        warm = remap_warm_start(warm, config.inserted)
    return solve_equilibrium(layout, specs, mesh, warm, gravity, options)


def greedy_expansion(graph: PlanGraph, params: PlannerParams, max_segments, seen):
    """Vertex and sample for a push toward the target, or None if every push was tried.

    Vertices are ranked by tip distance to the target. The innermost tool is
    turned by the azimuth error between tip and target about the insertion
    axis and, in order of preference, inserted, held or retracted; pushes that
    repeat a known configuration are skipped.
    """
    target = np.asarray(params.target)
    tips = graph.tips()
    order = np.argsort(np.linalg.norm(tips - target, axis=1), kind="stable")
    goal_az = np.arctan2(target[1], target[0])
    for i in order:
        base = graph.vertices[i]
        turn = float(wrap_angle(goal_az - np.arctan2(tips[i, 1], tips[i, 0])))
        for depth in (max_segments[0], base.inserted[0], 0):
            rand = SystemConfiguration(
                (depth,) + base.inserted[1:],
                (base.rotations[0] + turn,) + base.rotations[1:],
            )
            if steer(base, rand, params.step_segments, params.step_rotation, max_segments).key() not in seen:
                return int(i), rand
    return None


def build_rrt(
    start: SystemConfiguration,
    mesh: AnatomyMesh,
    specs: Sequence[ToolSpec],
    params: PlannerParams,
    gravity=(0.0, 0.0, 0.0),
    options: SolverOptions = SolverOptions(),
    progress: Optional[Callable[[int, PlanGraph], None]] = None,
) -> PlanGraph:
    """Grow the tree until the innermost tip is within tolerance of the target.

    One iteration is one expansion attempt. Candidates that repeat a stored
    configuration, fail to converge, or put the tip in a forbidden sphere are
    discarded. The graph is returned either way; ``goal_index`` is None when
    the budget ran out.
    """
    if start.tool_count != len(specs) or len(params.step_segments) != len(specs):
        raise ValueError("start configuration, step limits and tool list disagree")
    max_segments = [s.max_segments for s in specs]
    if any(m > hi for m, hi in zip(start.inserted, max_segments)):
        raise ValueError("start insertion exceeds max_segments")
    root = solve_configuration(start, mesh, specs, None, gravity, options)
    if not root.converged:
        raise ValueError("start configuration has no converged equilibrium")
    graph = PlanGraph([start], [root], [-1], [((0,) * start.tool_count, (0.0,) * start.tool_count)])
    target = np.asarray(params.target)
    seen = {start.key()}
    rng = np.random.default_rng(params.seed)
    weights = params.weights()

    def at_goal(sol):
        return float(np.linalg.norm(sol.tip - target)) <= params.goal_tolerance

    if at_goal(root):
        graph.goal_index = 0
        return graph

    for t in range(params.budget):
        graph.attempts = t + 1
        greedy = greedy_expansion(graph, params, max_segments, seen) if rng.random() < params.goal_bias else None
        if greedy is not None:
            near, rand = greedy
        else:
            rand = random_configuration(max_segments, rng)
            near = nearest_vertex(graph.vertices, rand, weights)
        dm, dt = steer_delta(graph.vertices[near], rand, params.step_segments, params.step_rotation,
                             max_segments)
        cand = apply_delta(graph.vertices[near], dm, dt)
        if cand.key() in seen:
            graph.rejected["duplicate"] += 1
            continue
        seen.add(cand.key())
        sol = solve_configuration(cand, mesh, specs, graph.solutions[near].gammas, gravity, options)
        if not sol.converged:
            graph.rejected["not_converged"] += 1
            continue
        if any(s.contains(sol.tip) for s in params.forbidden):
            graph.rejected["forbidden"] += 1
            continue
        graph.vertices.append(cand)
        graph.solutions.append(sol)
        graph.parents.append(near)
        graph.steps.append((dm, dt))
        if progress is not None:
            progress(t, graph)
        if at_goal(sol):
            graph.goal_index = len(graph.vertices) - 1
            break
    return graph


def extract_plan(graph: PlanGraph) -> Plan:
    """Command path from the root to the goal vertex.

    A tree has a unique path; the search below is a plain Dijkstra over the
    parent links so graphs with extra edges would also be handled.
    """
    if graph.goal_index is None:
        raise NoPathError("no vertex reached the goal")
    n = len(graph.vertices)
    adj: list[list[int]] = [[] for _ in range(n)]
    for p, c in graph.edges:
        adj[p].append(c)
    dist = [np.inf] * n
    prev = [-1] * n
    dist[graph.start_index] = 0
    heap = [(0, graph.start_index)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v in adj[u]:
            if d + 1 < dist[v]:
                dist[v] = d + 1
                prev[v] = u
                heapq.heappush(heap, (d + 1, v))
    if not np.isfinite(dist[graph.goal_index]):
        raise NoPathError("goal is not connected to the start")
    path = [graph.goal_index]
    while path[-1] != graph.start_index:
        path.append(prev[path[-1]])
    path.reverse()
    return Plan([graph.vertices[i] for i in path], [graph.steps[i] for i in path[1:]])


def plan_to_commands(plan: Plan, segment_length: float) -> list[Command]:
    """Linear-stage and rotation commands, one record per step and tool."""
    out = []
    for k, (dm, dt) in enumerate(plan.deltas, start=1):
        for j, (m, t) in enumerate(zip(dm, dt)):
            out.append(Command(k, j, int(m), int(m) * segment_length, float(t)))
    return out


PLAN_COLUMNS = ["step", "tool", "delta_segments", "delta_mm", "delta_theta_deg", "delta_theta_rad"]


def render_commands(commands: Sequence[Command]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLAN_COLUMNS)
    for c in commands:
        w.writerow([c.step, c.tool, c.delta_segments, repr(c.delta_length * 1e3),
                    repr(float(np.rad2deg(c.delta_rotation))), repr(c.delta_rotation)])
    return buf.getvalue()


def parse_commands(text: str, tool_count: int) -> list[tuple[tuple[int, ...], tuple[float, ...]]]:
    """Inverse of :func:`render_commands`: per-step ``(delta M, delta theta)``."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(PLAN_COLUMNS) - set(rows[0]):
        raise ValueError(f"plan file needs columns {PLAN_COLUMNS}")
    steps: dict[int, dict[int, tuple[int, float]]] = {}
    for r in rows:
        try:
            k, j = int(r["step"]), int(r["tool"])
            dm = int(r["delta_segments"])
            dt = float(r["delta_theta_rad"])
        except (TypeError, ValueError) as exc:
            raise ValueError(f"malformed plan row {r}") from exc
        if not 0 <= j < tool_count:
            raise ValueError(f"plan row refers to tool {j}, only {tool_count} configured")
        steps.setdefault(k, {})[j] = (dm, dt)
    if sorted(steps) != list(range(1, len(steps) + 1)):
        raise ValueError("plan steps must be numbered 1..n without gaps")
    out = []
    for k in sorted(steps):
        if len(steps[k]) != tool_count:
            raise ValueError(f"step {k} does not list every tool")
        out.append((tuple(steps[k][j][0] for j in range(tool_count)),
                    tuple(steps[k][j][1] for j in range(tool_count))))
    return out
