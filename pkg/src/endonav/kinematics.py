"""Piecewise-constant-curvature kinematics of telescoping tools.

Each tool is a chain of segments of equal length ``l``. Segment ``i`` bends
with a constant rotation vector ``gamma_i`` (bending about local x, bending
about local y, torsion about local z), so the frame at arc length ``s`` is

    R(s) = R_prev @ expm(hat(gamma * s / l))
    p(s) = p_prev + R_prev @ (s * J_l(gamma * s / l) @ e3)

where ``J_l`` is the left Jacobian of SO(3), i.e. the integral of the
exponential over the segment. The base frame of tool ``j`` sits at the common
origin and is rotated by ``theta_j`` about z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

E3 = np.array([0.0, 0.0, 1.0])

# below this angle the trigonometric coefficients switch to Taylor series
SERIES_THRESHOLD = 0.05

# Gauss-Legendre nodes on [0, 1] for per-segment line integrals
GAUSS_NODES = 0.5 * (1.0 + np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)]))
GAUSS_WEIGHTS = 0.5 * np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(v) @ w == cross(v, w)``.

    Accepts a single 3-vector or a stack of shape (..., 3).
    """
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _series_coefficients(t2):
    # Taylor expansions in theta^2; six terms each
    a = 1 - t2 / 6 * (1 - t2 / 20 * (1 - t2 / 42 * (1 - t2 / 72 * (1 - t2 / 110))))
    b = 0.5 * (1 - t2 / 12 * (1 - t2 / 30 * (1 - t2 / 56 * (1 - t2 / 90 * (1 - t2 / 132)))))
    c = (1 - t2 / 20 * (1 - t2 / 42 * (1 - t2 / 72 * (1 - t2 / 110 * (1 - t2 / 156))))) / 6
    db = -1 / 12 + t2 / 180 - t2**2 / 6720 + t2**3 / 453600 - t2**4 / 47900160
    dc = -1 / 60 + t2 / 1260 - t2**2 / 60480 + t2**3 / 4989600 - t2**4 / 622702080
    return a, b, c, db, dc


def _closed_coefficients(t):
    s, co = np.sin(t), np.cos(t)
    a = s / t
    # 1 - cos t written as 2 sin^2(t/2) to avoid cancellation at small t
    b = 2.0 * (np.sin(0.5 * t) / t) ** 2
    c = (t - s) / t**3
    db = s / t**3 - 2 * (1 - co) / t**4
    dc = (1 - co) / t**4 - 3 * (t - s) / t**5
    return a, b, c, db, dc


def so3_coefficients(w, method: str = "auto"):
    """Coefficients ``(A, B, C, B'/t, C'/t)`` of the SO(3) exponential family.

    ``A = sin t / t``, ``B = (1 - cos t) / t^2``, ``C = (t - sin t) / t^3`` with
    ``t = |w|``; the last two are derivatives divided by ``t``, which is the
    form needed by the Jacobians. ``method`` is ``"auto"``, ``"closed"`` or
    ``"series"``.
    """
    w = np.asarray(w, dtype=float)
    t2 = np.sum(w * w, axis=-1)
    t = np.sqrt(t2)
    if method == "series":
        return _series_coefficients(t2)
    if method == "closed":
        with np.errstate(divide="ignore", invalid="ignore"):
            return _closed_coefficients(t)
    small = t < SERIES_THRESHOLD
    if not small.any():
        return _closed_coefficients(t)
    if small.all():
        return _series_coefficients(t2)
    out = _closed_coefficients(np.where(small, 1.0, t))
    for o, sv in zip(out, _series_coefficients(t2[small])):
        o[small] = sv
    return out


def _outer_terms(w):
    W = hat(w)
    return W, W @ W


def expm_so3(w, method: str = "auto") -> np.ndarray:
    """Rotation matrix ``expm(hat(w))`` (Rodrigues). Works on stacks."""
    w = np.asarray(w, dtype=float)
    a, b, _, _, _ = so3_coefficients(w, method)
    W, W2 = _outer_terms(w)
    a = np.asarray(a)[..., None, None]
    b = np.asarray(b)[..., None, None]
    return np.eye(3) + a * W + b * W2


def right_jacobian(w, method: str = "auto") -> np.ndarray:
    w = np.asarray(w, dtype=float)
    _, b, c, _, _ = so3_coefficients(w, method)
    W, W2 = _outer_terms(w)
    return np.eye(3) - np.asarray(b)[..., None, None] * W + np.asarray(c)[..., None, None] * W2


def arc_direction(w, method: str = "auto") -> np.ndarray:
    """Mean tangent ``J_l(w) @ e3 = int_0^1 expm(hat(u w)) e3 du``.

    A segment with rotation vector ``w`` and length ``s`` advances by
    ``s * arc_direction(w)`` in its parent frame.
    """
    w = np.asarray(w, dtype=float)
    _, b, c, _, _ = so3_coefficients(w, method)
    b = np.asarray(b)[..., None]
    c = np.asarray(c)[..., None]
    t2 = np.sum(w * w, axis=-1)[..., None]
    w_cross_e3 = np.stack([w[..., 1], -w[..., 0], np.zeros_like(w[..., 0])], axis=-1)
    return E3 + b * w_cross_e3 + c * (w * w[..., 2:3] - t2 * E3)


def _arc_jacobian_from(w, b, c, db, dc):
    b = np.asarray(b)[..., None, None]
    c = np.asarray(c)[..., None, None]
    db = np.asarray(db)[..., None, None]
    dc = np.asarray(dc)[..., None, None]
    t2 = np.sum(w * w, axis=-1)[..., None]
    wz = w[..., 2:3]
    w_cross_e3 = np.stack([w[..., 1], -w[..., 0], np.zeros_like(w[..., 0])], axis=-1)
    u = w * wz - t2 * E3
    wt = w[..., None, :]
    jac = db * w_cross_e3[..., :, None] * wt
    jac = jac - b * hat(E3)
    jac = jac + dc * u[..., :, None] * wt
    ident = np.broadcast_to(np.eye(3), w.shape[:-1] + (3, 3))
    jac = jac + c * (
        wz[..., None] * ident + w[..., :, None] * E3[None, :] - 2.0 * E3[:, None] * wt
    )
    return jac


def arc_direction_jacobian(w) -> np.ndarray:
    """Derivative of :func:`arc_direction` with respect to ``w``; shape (..., 3, 3)."""
    w = np.asarray(w, dtype=float)
    _, b, c, db, dc = so3_coefficients(w)
    return _arc_jacobian_from(w, b, c, db, dc)


def _segment_jacobians(w):
    """``arc_direction_jacobian(w)`` and ``right_jacobian(w)`` from one coefficient pass."""
    w = np.asarray(w, dtype=float)
    _, b, c, db, dc = so3_coefficients(w)
    W, W2 = _outer_terms(w)
    right = np.eye(3) - np.asarray(b)[..., None, None] * W + np.asarray(c)[..., None, None] * W2
    return _arc_jacobian_from(w, b, c, db, dc), right


@dataclass(frozen=True)
class Frame:
    origin: np.ndarray
    rotation: np.ndarray


@dataclass(frozen=True)
class ToolLayout:
    """Inserted segment counts and base rotations; tool 0 is the innermost."""

    segments: tuple[int, ...]
    segment_length: float
    base_rotations: tuple[float, ...] = field(default=())

    def __post_init__(self):
        segs = tuple(int(m) for m in self.segments)
        if not segs:
            raise ValueError("layout needs at least one tool")
        if any(m < 0 for m in segs):
            raise ValueError(f"segment counts must be non-negative, got {segs}")
        if self.segment_length <= 0:
            raise ValueError("segment_length must be positive")
        rots = tuple(float(t) for t in self.base_rotations) or (0.0,) * len(segs)
        if len(rots) != len(segs):
            raise ValueError("one base rotation per tool is required")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "base_rotations", rots)

    @property
    def tool_count(self) -> int:
        return len(self.segments)


def segment_transform(gamma, s: float, l: float, method: str = "auto"):
    """Rotation and position increment of a segment evaluated at arc length ``s``.

    Returns ``(R, p)`` with ``R = expm(hat(gamma s / l))`` and
    ``p = int_0^s expm(hat(gamma u / l)) e3 du``.
    """
    if not 0.0 <= s <= l:
        raise ValueError(f"arc length {s} outside [0, {l}]")
    w = np.asarray(gamma, dtype=float) * (s / l)
    return expm_so3(w, method), s * arc_direction(w, method)


class Chain:
    """Segment-end frames of one tool plus what is needed to pull back forces.

    ``positions[i]`` and ``rotations[i]`` are the frame at the end of segment
    ``i`` (index 0 is the base frame at the origin). When ``quadrature`` is set,
    ``quad_points[i, q]`` holds Gauss points along segment ``i + 1``.
    """

    def __init__(self, gammas, theta: float, l: float, quadrature: bool = False):
        g = np.asarray(gammas, dtype=float).reshape(-1, 3)
        self.gammas = g
        self.l = float(l)
        m = len(g)
        self.m = m
        rot = np.empty((m + 1, 3, 3))
        pos = np.zeros((m + 1, 3))
        rot[0] = rot_z(theta)
        if m:
            seg_rot = expm_so3(g)
            seg_vec = self.l * arc_direction(g)
            for i in range(m):
                pos[i + 1] = pos[i] + rot[i] @ seg_vec[i]
                rot[i + 1] = rot[i] @ seg_rot[i]
        self.positions = pos
        self.rotations = rot
        self.quad_points = None
        self._jacobians = None
        if quadrature and m:
            s = GAUSS_NODES * self.l
            w = g[:, None, :] * GAUSS_NODES[None, :, None]
            local = s[None, :, None] * arc_direction(w)
            self.quad_points = pos[:-1, None, :] + np.einsum("iab,iqb->iqa", rot[:-1], local)

    def segment_jacobians(self):
        """Per-segment arc-direction and right Jacobians, computed once."""
        if self._jacobians is None:
            self._jacobians = _segment_jacobians(self.gammas)
        return self._jacobians

    @property
    def tip(self) -> np.ndarray:
        return self.positions[-1]

    def frames(self) -> list[Frame]:
        return [Frame(p.copy(), r.copy()) for p, r in zip(self.positions, self.rotations)]

    def position_jacobian(self) -> np.ndarray:
        """``jac[i, :, m, :] = d p_{i+1} / d gamma_{m+1}``; shape (m, 3, m, 3)."""
        m = self.m
        if m == 0:
            return np.zeros((0, 3, 0, 3))
        g = self.gammas
        darc, jr = self.segment_jacobians()
        direct = self.l * np.einsum("mab,mbc->mac", self.rotations[:-1], darc)
        turn = np.einsum("mab,mbc->mac", self.rotations[1:], jr)
        ends = self.positions[1:]
        lever = ends[:, None, :] - ends[None, :, :]
        # -hat(lever) @ turn, column by column
        cols = np.cross(turn.transpose(0, 2, 1)[None, :, :, :], lever[:, :, None, :])
        jac = direct[None, :, :, :] + cols.transpose(0, 1, 3, 2)
        jac *= np.tril(np.ones((m, m)))[:, :, None, None]
        return jac.transpose(0, 2, 1, 3)

    def load_hessian(self, end_forces) -> np.ndarray:
        """Hessian of ``sum f . p`` over segment ends for fixed forces; shape (3m, 3m).

        This is the geometric stiffness that a Gauss-Newton model leaves out.
        Off-diagonal blocks are closed form; the second derivatives of the
        per-segment maps on the diagonal use central differences.
        """
        m = self.m
        if m == 0:
            return np.zeros((0, 0))
        force = np.asarray(end_forces, dtype=float)
        pos = self.positions[1:]
        rot_prev = self.rotations[:-1]
        rot_end = self.rotations[1:]
        g = self.gammas
        total_f = np.cumsum(force[::-1], axis=0)[::-1]
        cross_sum = np.cumsum((hat(force) @ hat(pos))[::-1], axis=0)[::-1]
        moment = np.cumsum(np.cross(pos, force)[::-1], axis=0)[::-1]
        torque = moment - np.cross(pos, total_f)
        geo = hat(torque) + cross_sum - hat(total_f) @ hat(pos)
        darc, jr = self.segment_jacobians()
        rt = rot_end.transpose(0, 2, 1)
        turn = jr.transpose(0, 2, 1) @ rt @ geo
        a = self.l * darc.transpose(0, 2, 1) @ rot_prev.transpose(0, 2, 1) @ hat(total_f) + turn
        w = rot_end @ jr
        blocks = np.einsum("mab,nbc->mnac", a, w)
        blocks *= np.tril(np.ones((m, m)), -1)[:, :, None, None]
        blocks = blocks + blocks.transpose(1, 0, 3, 2)

        local_f = np.einsum("iba,ib->ia", rot_prev, total_f)
        local_t = np.einsum("iba,ib->ia", rot_end, torque)
        h = 1e-6
        # rotating the frame before segment m leaves its own chord direction alone
        diag = turn @ w
        steps = h * np.eye(3)
        probe = np.concatenate([g[None] + steps[:, None], g[None] - steps[:, None]])
        arc_d, right_d = _segment_jacobians(probe)
        for k in range(3):
            dd = (arc_d[k] - arc_d[k + 3]) / (2 * h)
            dj = (right_d[k] - right_d[k + 3]) / (2 * h)
            diag[:, :, k] += self.l * np.einsum("iba,ib->ia", dd, local_f)
            diag[:, :, k] += np.einsum("iba,ib->ia", dj, local_t)
        idx = np.arange(m)
        blocks[idx, idx] = 0.5 * (diag + diag.transpose(0, 2, 1))
        return blocks.transpose(0, 2, 1, 3).reshape(3 * m, 3 * m)

    def pullback(self, end_forces=None, quad_forces=None) -> np.ndarray:
        """Gradient w.r.t. the bending vectors of ``sum f . x`` over loaded points.

        ``end_forces`` has shape (m, 3) and acts on segment ends 1..m;
        ``quad_forces`` has shape (m, 3, 3) and acts on the Gauss points.
        """
        m = self.m
        grad = np.zeros((m, 3))
        if m == 0:
            return grad
        pos = self.positions
        force = np.zeros((m, 3)) if end_forces is None else np.asarray(end_forces, dtype=float)
        moment = np.cross(pos[1:], force)
        if quad_forces is not None:
            qf = np.asarray(quad_forces, dtype=float)
            qsum = qf.sum(axis=1)
            qmom = np.cross(self.quad_points, qf).sum(axis=1)
            # quad points of segment i are downstream of segment ends < i
            force = force.copy()
            moment = moment.copy()
            force[:-1] += qsum[1:]
            moment[:-1] += qmom[1:]
        total_f = np.cumsum(force[::-1], axis=0)[::-1]
        total_m = np.cumsum(moment[::-1], axis=0)[::-1]
        torque = total_m - np.cross(pos[1:], total_f)

        g = self.gammas
        rot_prev = self.rotations[:-1]
        rot_end = self.rotations[1:]
        darc, jr = self.segment_jacobians()
        local_f = np.einsum("iba,ib->ia", rot_prev, total_f)
        grad += self.l * np.einsum("iba,ib->ia", darc, local_f)
        local_t = np.einsum("iba,ib->ia", rot_end, torque)
        grad += np.einsum("iba,ib->ia", jr, local_t)
        if quad_forces is not None:
            scale = GAUSS_NODES**2 * self.l
            w = g[:, None, :] * GAUSS_NODES[None, :, None]
            dq = arc_direction_jacobian(w)
            local_q = np.einsum("iba,iqb->iqa", rot_prev, qf)
            grad += np.einsum("q,iqba,iqb->ia", scale, dq, local_q)
        return grad


def _check_stack(layout: ToolLayout, gamma_stack) -> list[np.ndarray]:
    if len(gamma_stack) != layout.tool_count:
        raise ValueError(
            f"gamma stack has {len(gamma_stack)} tools, layout has {layout.tool_count}"
        )
    out = []
    for j, (m, g) in enumerate(zip(layout.segments, gamma_stack)):
        g = np.asarray(g, dtype=float).reshape(-1, 3)
        if len(g) != m:
            raise ValueError(f"tool {j}: {len(g)} bending vectors for {m} segments")
        out.append(g)
    return out


def build_chains(layout: ToolLayout, gamma_stack, quadrature: bool = False) -> list[Chain]:
    stack = _check_stack(layout, gamma_stack)
    return [
        Chain(g, th, layout.segment_length, quadrature)
        for g, th in zip(stack, layout.base_rotations)
    ]


def forward_kinematics(layout: ToolLayout, gamma_stack) -> list[list[Frame]]:
    """Frames at every segment end, per tool, starting with the base frame."""
    return [c.frames() for c in build_chains(layout, gamma_stack)]


def tip_position(layout: ToolLayout, gamma_stack) -> np.ndarray:
    """Tip of the innermost tool; the origin when it has no inserted segments."""
    stack = _check_stack(layout, gamma_stack)
    return Chain(stack[0], layout.base_rotations[0], layout.segment_length).tip.copy()


def zero_stack(segments: Sequence[int]) -> list[np.ndarray]:
    return [np.zeros((m, 3)) for m in segments]
