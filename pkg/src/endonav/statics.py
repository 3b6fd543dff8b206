"""Constrained static equilibrium of telescoping pre-bent tools inside a rigid anatomy.

The bending-vector stack minimizes the total elastic plus gravitational
energy subject to coincident centerlines over overlapping segments (equality
constraints) and non-negative signed penetration of every segment end
(inequality constraints). The constrained problem is solved with an
augmented Lagrangian outer loop around damped Newton steps whose Hessian
combines the constraint Gauss-Newton term with the geometric stiffness of
the current constraint forces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .anatomy import AnatomyMesh, nearest_triangle, penetration_and_normal, signed_penetration
from .kinematics import GAUSS_WEIGHTS, Chain, Frame, ToolLayout, build_chains

# catheter-like tools with E = 0 get this fraction of the stiffest tool's stiffness
STIFFNESS_REGULARIZATION = 1e-9
# per-component bound on a segment's bending vector; keeps |gamma| below pi
GAMMA_BOUND = np.pi / 2
# inner solves stop when the merit has not moved over this many steps
STALL_WINDOW = 8
# largest segment-end displacement per step, in segment lengths
MAX_MOVE = 0.25


class InfeasibleStartError(ValueError):
    """The tool base lies outside the anatomy."""


@dataclass(frozen=True)
class ToolSpec:
    """Geometry and material of one tool.

    ``tip_prebend`` lists rest bending vectors for the distal segments,
    ordered proximal to distal; the last row belongs to the tip segment.
    """

    name: str = "tool"
    outer_diameter: float = 0.889e-3
    youngs_modulus: float = 70e9
    poisson_ratio: float = 0.33
    mass_per_length: float = 0.0
    segment_length: float = 1.25e-3
    max_segments: int = 120
    tip_prebend: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    second_moment_override: Optional[float] = None

    def __post_init__(self):
        pre = np.asarray(self.tip_prebend, dtype=float).reshape(-1, 3)
        pre.setflags(write=False)
        object.__setattr__(self, "tip_prebend", pre)
        if self.youngs_modulus < 0:
            raise ValueError("youngs_modulus must be >= 0")
        if not -1.0 < self.poisson_ratio <= 0.5:
            raise ValueError("poisson_ratio must lie in (-1, 0.5]")
        if self.outer_diameter <= 0 or self.segment_length <= 0:
            raise ValueError("diameter and segment length must be positive")
        if self.max_segments < 0:
            raise ValueError("max_segments must be >= 0")
        if len(pre) > self.max_segments:
            raise ValueError("tip_prebend is longer than max_segments")
        if self.second_moment <= 0:
            raise ValueError("second moment of area must be positive")

    @property
    def second_moment(self) -> float:
        if self.second_moment_override is not None:
            return float(self.second_moment_override)
        return np.pi * self.outer_diameter**4 / 64.0

    def rest_curvature(self, inserted: int) -> np.ndarray:
        """Rest bending vectors of the ``inserted`` distal-most segments."""
        rest = np.zeros((inserted, 3))
        n = min(inserted, len(self.tip_prebend))
        if n:
            rest[inserted - n:] = self.tip_prebend[len(self.tip_prebend) - n:]
        return rest


def bending_stiffness(spec: ToolSpec) -> np.ndarray:
    """Diagonal stiffness ``diag(1, 1, 1/(2(1+nu))) * E A / l``."""
    ea_l = spec.youngs_modulus * spec.second_moment / spec.segment_length
    return np.diag([ea_l, ea_l, ea_l / (2.0 * (spec.poisson_ratio + 1.0))])


def _check_specs(layout: ToolLayout, specs: Sequence[ToolSpec]):
    if len(specs) != layout.tool_count:
        raise ValueError(f"{len(specs)} tool specs for {layout.tool_count} tools")
    for s in specs:
        if not np.isclose(s.segment_length, layout.segment_length, rtol=1e-12, atol=0):
            raise ValueError("all tools must share the layout's segment length")
        if s.max_segments < 0:
            raise ValueError("bad max_segments")
    for m, s in zip(layout.segments, specs):
        if m > s.max_segments:
            raise ValueError(f"{s.name}: {m} segments exceed max_segments={s.max_segments}")


def rest_stack(layout: ToolLayout, specs: Sequence[ToolSpec]) -> list[np.ndarray]:
    return [s.rest_curvature(m) for s, m in zip(specs, layout.segments)]


def _split(x: np.ndarray, segments: Sequence[int]) -> list[np.ndarray]:
    out, start = [], 0
    for m in segments:
        out.append(x[start:start + 3 * m].reshape(m, 3))
        start += 3 * m
    return out


def flatten_stack(gamma_stack) -> np.ndarray:
    parts = [np.asarray(g, dtype=float).reshape(-1) for g in gamma_stack]
    return np.concatenate(parts) if parts else np.zeros(0)


def potential_energy(layout: ToolLayout, specs, gamma_stack, gravity=(0.0, 0.0, 0.0)):
    """Total potential energy and per-tool values ``U_j`` in joules."""
    _check_specs(layout, specs)
    g = np.asarray(gravity, dtype=float)
    use_gravity = bool(np.any(g))
    chains = build_chains(layout, gamma_stack, quadrature=use_gravity)
    l = layout.segment_length
    per_tool = []
    for chain, spec in zip(chains, specs):
        k = np.diag(bending_stiffness(spec))
        delta = chain.gammas - spec.rest_curvature(chain.m)
        u = 0.5 * l * float(np.sum(delta * delta * k))
        if use_gravity and chain.m:
            integral = l * np.einsum("q,iqa->a", GAUSS_WEIGHTS, chain.quad_points)
            u -= spec.mass_per_length * float(g @ integral)
        per_tool.append(u)
    return float(sum(per_tool)), per_tool


def energy_gradient(layout: ToolLayout, specs, gamma_stack, gravity=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Gradient of :func:`potential_energy` w.r.t. the flattened bending stack."""
    _check_specs(layout, specs)
    g = np.asarray(gravity, dtype=float)
    use_gravity = bool(np.any(g))
    chains = build_chains(layout, gamma_stack, quadrature=use_gravity)
    l = layout.segment_length
    parts = []
    for chain, spec in zip(chains, specs):
        k = np.diag(bending_stiffness(spec))
        grad = l * k * (chain.gammas - spec.rest_curvature(chain.m))
        if use_gravity and chain.m and spec.mass_per_length:
            qf = -spec.mass_per_length * l * GAUSS_WEIGHTS[None, :, None] * g[None, None, :]
            qf = np.broadcast_to(qf, (chain.m, len(GAUSS_WEIGHTS), 3))
            grad = grad + chain.pullback(None, qf)
        parts.append(grad.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def _telescoping_pairs(segments: Sequence[int]):
    """(tool, reference tool, segment end) triples without repetitions.

    Each outer tool's segment end ``i`` is tied to the innermost tool that
    also reaches ``i``; tying it to every other tool would repeat constraints.
    """
    pairs = []
    for k in range(1, len(segments)):
        for i in range(1, segments[k] + 1):
            ref = next((j for j in range(k) if segments[j] >= i), None)
            if ref is not None:
                pairs.append((ref, k, i))
    return pairs


def telescoping_constraints(layout: ToolLayout, gamma_stack) -> np.ndarray:
    """Stacked position gaps ``p_j(end i) - p_k(end i)`` over overlapping segments."""
    chains = build_chains(layout, gamma_stack)
    return _telescoping_residual(chains, layout.segments)


def _telescoping_residual(chains: list[Chain], segments) -> np.ndarray:
    pairs = _telescoping_pairs(segments)
    if not pairs:
        return np.zeros(0)
    return np.concatenate(
        [chains[j].positions[i] - chains[k].positions[i] for j, k, i in pairs]
    )


def anatomy_constraints(layout: ToolLayout, gamma_stack, mesh: AnatomyMesh) -> np.ndarray:
    """Signed penetration of every segment end, tool-major."""
    chains = build_chains(layout, gamma_stack)
    pts = [c.positions[1:] for c in chains]
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(pts) == 0:
        return np.zeros(0)
    d, _ = penetration_and_normal(mesh, pts)
    return d


@dataclass(frozen=True)
class SolverOptions:
    eq_tol: float = 1e-6
    ineq_tol: float = 1e-4
    max_outer: int = 500
    max_inner: int = 200
    rho_initial: float = 10.0
    rho_max: float = 1e8
    # convergence asks for this fraction of the tolerances so callers get margin
    feasibility_margin: float = 0.1
    gradient_tol: float = 1e-8


@dataclass
class StaticsSolution:
    gammas: list[np.ndarray]
    positions: list[np.ndarray]
    rotations: list[np.ndarray]
    potential_energy: float
    telescoping_residual: float
    penetration_min: float
    tip: np.ndarray
    converged: bool
    iterations: int
    inner_iterations: int = 0
    # merit before and after every accepted inner step, against that step's contact planes
    merit_history: list[tuple[float, float]] = field(default_factory=list)

    @property
    def frames(self) -> list[list[Frame]]:
        return [
            [Frame(p.copy(), r.copy()) for p, r in zip(P, R)]
            for P, R in zip(self.positions, self.rotations)
        ]


class _Problem:
    """Scaled augmented-Lagrangian merit function for one layout.

    Lengths are measured in segment lengths and energies in ``k_ref * l`` so
    the unknowns, constraints and objective are all of order one.
    """

    def __init__(self, layout, specs, mesh, gravity):
        self.layout = layout
        self.segments = layout.segments
        self.l = layout.segment_length
        self.mesh = mesh
        self.gravity = np.asarray(gravity, dtype=float)
        self.use_gravity = bool(np.any(self.gravity))
        stiff = [np.diag(bending_stiffness(s)) for s in specs]
        k_ref = max(float(k.max()) for k in stiff)
        if k_ref <= 0:
            k_ref = 1.0
        reg = STIFFNESS_REGULARIZATION * k_ref
        self.k_scaled = [(k + reg) / k_ref for k in stiff]
        self.energy_scale = k_ref * self.l
        self.mass = [s.mass_per_length for s in specs]
        self.rest = rest_stack(layout, specs)
        self.pairs = _telescoping_pairs(self.segments)
        self.n_eq = 3 * len(self.pairs)
        self.n_ineq = int(sum(self.segments))
        offsets = np.concatenate([[0], np.cumsum(self.segments)[:-1]]).astype(int)
        a, b = [], []
        for j, k, i in self.pairs:
            a.extend(3 * (offsets[j] + i - 1) + np.arange(3))
            b.extend(3 * (offsets[k] + i - 1) + np.arange(3))
        self.eq_rows_a = np.array(a, dtype=int)
        self.eq_rows_b = np.array(b, dtype=int)
        self.k_diag = np.concatenate(
            [np.tile(k, m) for k, m in zip(self.k_scaled, self.segments)] or [np.zeros(0)]
        )

    def chains(self, x):
        return [
            Chain(g, th, self.l, self.use_gravity)
            for g, th in zip(_split(x, self.segments), self.layout.base_rotations)
        ]

    def end_points(self, chains) -> np.ndarray:
        pts = [ch.positions[1:] for ch in chains]
        return np.concatenate(pts) if pts else np.zeros((0, 3))

    def contact_planes(self, chains):
        """Centroid and inward normal of the nearest triangle of every segment end."""
        pts = self.end_points(chains)
        if len(pts) == 0:
            return np.zeros((0, 3)), np.zeros((0, 3))
        k = nearest_triangle(self.mesh, pts)
        return self.mesh.centroids[k], self.mesh.normals[k]

    def constraint_values(self, chains, planes=None):
        """Scaled telescoping gaps, scaled penetrations and the contact normals.

        With ``planes`` given, penetration is measured against those fixed
        triangle planes instead of re-querying the nearest triangle.
        """
        c = _telescoping_residual(chains, self.segments) / self.l
        if planes is None:
            planes = self.contact_planes(chains)
        centers, normals = planes
        pts = self.end_points(chains)
        d = np.einsum("ij,ij->i", pts - centers, normals) if len(pts) else np.zeros(0)
        return c, d / self.l, normals

    def energy(self, chains):
        """Scaled energy and its gradient per tool."""
        total = 0.0
        grads = []
        for chain, k, rest, m in zip(chains, self.k_scaled, self.rest, self.mass):
            delta = chain.gammas - rest
            total += 0.5 * float(np.sum(delta * delta * k))
            grad = delta * k
            if self.use_gravity and chain.m and m:
                w = -m * self.l / self.energy_scale
                integral = np.einsum("q,iqa->a", GAUSS_WEIGHTS, chain.quad_points)
                total += w * float(self.gravity @ integral)
                qf = w * GAUSS_WEIGHTS[None, :, None] * self.gravity[None, None, :]
                grad = grad + chain.pullback(None, np.broadcast_to(qf, (chain.m, 3, 3)))
            grads.append(grad)
        return total, grads

    def evaluate(self, x, lam, mu, rho, planes, derivatives=True):
        """Merit value, and with ``derivatives`` its gradient and Hessian.

        Contact is evaluated against the frozen ``planes`` so the merit is
        smooth in ``x``; the caller refreshes them between steps.
        """
        chains = self.chains(x)
        f, grads = self.energy(chains)
        c, s, normals = self.constraint_values(chains, planes)
        value = f
        shifted = np.maximum(0.0, mu - rho * s)
        if self.n_eq:
            value += float(lam @ c) + 0.5 * rho * float(c @ c)
        if self.n_ineq:
            value += float(np.sum(shifted**2 - mu**2)) / (2.0 * rho)
        if not derivatives:
            return value
        self.last_jacobian = None
        jp = self._point_jacobian(chains)
        grad = np.concatenate([g.ravel() for g in grads])
        hess = np.diag(self.k_diag)
        # constraint forces on the segment ends, for the geometric stiffness
        loads = np.zeros(3 * self.n_ineq)
        if self.n_eq:
            jc = (jp[self.eq_rows_a] - jp[self.eq_rows_b]) / self.l
            grad += jc.T @ (lam + rho * c)
            hess += rho * (jc.T @ jc)
            np.add.at(loads, self.eq_rows_a, (lam + rho * c) / self.l)
            np.subtract.at(loads, self.eq_rows_b, (lam + rho * c) / self.l)
        if self.n_ineq:
            js = np.einsum("pa,pan->pn", normals, jp.reshape(self.n_ineq, 3, -1)) / self.l
            grad -= js.T @ shifted
            loads -= (shifted[:, None] * normals).ravel() / self.l
        off = 0
        for ch in chains:
            size = 3 * ch.m
            if size:
                block = ch.load_hessian(loads[off:off + size].reshape(-1, 3))
                hess[off:off + size, off:off + size] += block
            off += size
            active = shifted > 0
            if np.any(active):
                ja = js[active]
                hess += rho * (ja.T @ ja)
        self.last_jacobian = jp
        return value, grad, hess

    def _point_jacobian(self, chains) -> np.ndarray:
        """Jacobian of all segment-end points (tool-major) w.r.t. the flat stack."""
        n = 3 * self.n_ineq
        jac = np.zeros((n, n))
        off = 0
        for ch in chains:
            size = 3 * ch.m
            if size:
                jac[off:off + size, off:off + size] = ch.position_jacobian().reshape(size, size)
            off += size
        return jac


def _inner_solve(prob, x, lam, mu, rho, max_iter, gtol):
    """Levenberg-Marquardt descent on the merit function.

    Each step freezes the contact plane of every segment end at the current
    iterate; planes are re-queried after the step is accepted. Returns the new
    point, the merit before and after every accepted step (both against that
    step's frozen planes), the iteration count and whether the projected
    gradient fell below ``gtol`` or progress stalled.
    """
    planes = prob.contact_planes(prob.chains(x))
    value, grad, hess = prob.evaluate(x, lam, mu, rho, planes)
    steps = []
    damping = 1e-6
    eye = np.eye(len(x))
    done = False
    it = 0
    recent = [value]
    for it in range(1, max_iter + 1):
        pg = grad.copy()
        pg[(x >= GAMMA_BOUND) & (grad < 0)] = 0.0
        pg[(x <= -GAMMA_BOUND) & (grad > 0)] = 0.0
        if np.max(np.abs(pg)) < gtol:
            done = True
            break
        accepted = False
        while damping < 1e10:
            try:
                factor = cho_factor(hess + damping * eye, check_finite=False)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            delta = cho_solve(factor, -grad, check_finite=False)
            # frozen planes are only trusted near the current point
            move = np.max(np.linalg.norm((prob.last_jacobian @ delta).reshape(-1, 3), axis=1))
            if move > MAX_MOVE * prob.l:
                delta *= MAX_MOVE * prob.l / move
            trial = x + delta
            trial = np.clip(trial, -GAMMA_BOUND, GAMMA_BOUND)
            step = trial - x
            trial_value = prob.evaluate(trial, lam, mu, rho, planes, derivatives=False)
            if trial_value <= value + 1e-4 * float(grad @ step):
                accepted = True
                break
            damping *= 4.0
        if not accepted:
            done = True
            break
        damping = max(damping / 3.0, 1e-12)
        steps.append((value, trial_value))
        x = trial
        planes = prob.contact_planes(prob.chains(x))
        value, grad, hess = prob.evaluate(x, lam, mu, rho, planes)
        recent.append(value)
        if np.max(np.abs(step)) < 1e-10:
            done = True
            break
        # nearest-triangle switching can cycle without progress; stop on a stall
        if len(recent) > STALL_WINDOW and recent[-STALL_WINDOW - 1] - value <= 1e-10 * (1.0 + abs(value)):
            done = True
            break
    return x, steps, it, done


def solve_equilibrium(
    layout: ToolLayout,
    specs: Sequence[ToolSpec],
    mesh: AnatomyMesh,
    warm_start=None,
    gravity=(0.0, 0.0, 0.0),
    options: SolverOptions = SolverOptions(),
) -> StaticsSolution:
    """Local minimizer of the potential energy under telescoping and contact constraints.

    Raises :class:`InfeasibleStartError` when the common tool origin is
    outside the anatomy. A solve that runs out of iterations is returned with
    ``converged=False``.
    """
    _check_specs(layout, specs)
    if signed_penetration(mesh, np.zeros(3)) < 0:
        raise InfeasibleStartError("infeasible start: tool base lies outside the anatomy")
    prob = _Problem(layout, specs, mesh, gravity)
    if warm_start is None:
        x = flatten_stack(prob.rest)
    else:
        if len(warm_start) != layout.tool_count or any(
            np.asarray(g).reshape(-1, 3).shape[0] != m for g, m in zip(warm_start, layout.segments)
        ):
            raise ValueError("warm start does not match the layout")
        x = flatten_stack(warm_start)
    x = np.clip(x, -GAMMA_BOUND, GAMMA_BOUND)

    lam = np.zeros(prob.n_eq)
    mu = np.zeros(prob.n_ineq)
    rho = options.rho_initial
    eq_target = options.eq_tol * options.feasibility_margin
    ineq_target = options.ineq_tol * options.feasibility_margin
    history = []
    inner_total = 0
    converged = len(x) == 0
    prev_violation = np.inf
    outer = 0
    while not converged and outer < options.max_outer:
        outer += 1
        x, steps, nit, inner_done = _inner_solve(
            prob, x, lam, mu, rho, options.max_inner, options.gradient_tol
        )
        inner_total += nit
        history.extend(steps)
        c, s, _ = prob.constraint_values(prob.chains(x))
        eq_v = float(np.max(np.abs(c))) * prob.l if len(c) else 0.0
        in_v = float(max(0.0, -np.min(s))) * prob.l if len(s) else 0.0
        if eq_v <= eq_target and in_v <= ineq_target and inner_done:
            converged = True
            break
        if len(c):
            lam = lam + rho * c
        if len(s):
            mu = np.maximum(0.0, mu - rho * s)
        violation = max(eq_v / options.eq_tol, in_v / options.ineq_tol)
        if violation > 0.25 * prev_violation and rho < options.rho_max:
            rho = min(rho * 10.0, options.rho_max)
        prev_violation = violation

    return _package(prob, layout, specs, x, gravity, converged, outer, inner_total, history, options)


def _package(prob, layout, specs, x, gravity, converged, outer, inner, history, options):
    gammas = [g.copy() for g in _split(x, layout.segments)]
    chains = build_chains(layout, gammas)
    u, _ = potential_energy(layout, specs, gammas, gravity)
    c = _telescoping_residual(chains, layout.segments)
    pts = [ch.positions[1:] for ch in chains]
    pts = np.concatenate(pts) if pts else np.zeros((0, 3))
    s = penetration_and_normal(prob.mesh, pts)[0] if len(pts) else np.zeros(0)
    tele = float(np.max(np.abs(c))) if len(c) else 0.0
    pen = float(np.min(s)) if len(s) else float("inf")
    if converged and (tele >= options.eq_tol or pen <= -options.ineq_tol):
        converged = False
    return StaticsSolution(
        gammas=gammas,
        positions=[ch.positions for ch in chains],
        rotations=[ch.rotations for ch in chains],
        potential_energy=u,
        telescoping_residual=tele,
        penetration_min=pen,
        tip=chains[0].tip.copy(),
        converged=converged,
        iterations=outer,
        inner_iterations=inner,
        merit_history=history,
    )
