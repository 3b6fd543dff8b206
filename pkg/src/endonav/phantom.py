"""Synthetic vessel phantoms: a main tube with two side branches, and simple test shapes.

The branch phantom is a stand-in for the aortic arch: the main tube plays the
descending aorta (axis along +z through the tool origin), the lower branch the
left subclavian artery (to avoid) and the upper branch the left common carotid
artery (target). Lengths are in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .anatomy import AnatomyMesh, mesh_from_arrays


@dataclass(frozen=True)
class Tube:
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        a = np.asarray(self.start, dtype=float)
        b = np.asarray(self.end, dtype=float)
        ab = b - a
        t = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
        closest = a + t[..., None] * ab
        return np.linalg.norm(pts - closest, axis=-1) - self.radius


@dataclass(frozen=True)
class BranchPhantom:
    aorta_radius: float = 11.0
    aorta_bottom: float = -20.0
    aorta_top: float = 80.0
    lsa_height: float = 24.0
    lsa_radius: float = 4.0
    lsa_tilt_deg: float = 40.0
    lsa_length: float = 22.0
    lcca_height: float = 46.0
    lcca_radius: float = 4.0
    lcca_tilt_deg: float = 40.0
    lcca_length: float = 26.0
    # branches leave the main tube toward this azimuth (degrees about +z from +x)
    branch_azimuth_deg: float = 0.0
    blend: float = 3.0
    resolution: float = 0.9

    def _direction(self, tilt_deg: float) -> np.ndarray:
        t = np.deg2rad(tilt_deg)
        az = np.deg2rad(self.branch_azimuth_deg)
        return np.array([np.sin(t) * np.cos(az), np.sin(t) * np.sin(az), np.cos(t)])

    def tubes(self) -> list[Tube]:
        main = Tube((0.0, 0.0, self.aorta_bottom), (0.0, 0.0, self.aorta_top), self.aorta_radius)
        return [main, self._branch("lsa"), self._branch("lcca")]

    def _branch(self, which: str) -> Tube:
        h = getattr(self, f"{which}_height")
        d = self._direction(getattr(self, f"{which}_tilt_deg"))
        length = self.aorta_radius / np.sin(np.deg2rad(getattr(self, f"{which}_tilt_deg")))
        length += getattr(self, f"{which}_length")
        start = np.array([0.0, 0.0, h])
        return Tube(tuple(start), tuple(start + length * d), getattr(self, f"{which}_radius"))

    def branch_point(self, which: str, depth: float) -> np.ndarray:
        """Point on a branch axis ``depth`` mm past the main-tube wall."""
        tube = self._branch(which)
        d = self._direction(getattr(self, f"{which}_tilt_deg"))
        wall = self.aorta_radius / np.sin(np.deg2rad(getattr(self, f"{which}_tilt_deg")))
        return np.asarray(tube.start) + (wall + depth) * d

    def target(self) -> np.ndarray:
        """Target near the distal end of the upper branch (mm)."""
        return self.branch_point("lcca", self.lcca_length - 6.0)

    def forbidden_center(self) -> np.ndarray:
        return self.branch_point("lsa", 0.5 * self.lsa_length)

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        tubes = self.tubes()
        d = tubes[0].sdf(pts)
        for tube in tubes[1:]:
            d = _smooth_min(d, tube.sdf(pts), self.blend)
        return d

    def triangulate(self) -> tuple[np.ndarray, np.ndarray]:
        """Vertices (mm) and triangles of the closed phantom surface."""
        tubes = self.tubes()
        lo = np.min([np.minimum(t.start, t.end) - t.radius for t in tubes], axis=0) - 3.0
        hi = np.max([np.maximum(t.start, t.end) + t.radius for t in tubes], axis=0) + 3.0
        h = self.resolution
        # irrational offset keeps grid nodes off the zero level set
        origin = lo - h * np.array([0.1234567, 0.2345678, 0.3456789])
        shape = np.ceil((hi - origin) / h).astype(int) + 1
        axes = [origin[i] + h * np.arange(shape[i]) for i in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        values = self.sdf(grid.reshape(-1, 3)).reshape(shape)
        verts, faces, _, _ = marching_cubes(values, level=0.0, spacing=(h, h, h))
        return _collapse_short_edges(verts + origin, faces.astype(np.int64), 0.05 * h)

    def mesh(self, units_scale: float = 1e-3) -> AnatomyMesh:
        verts, faces = self.triangulate()
        return mesh_from_arrays(verts * units_scale, faces)


def _collapse_short_edges(verts, faces, tol):
    """Merge vertex clusters closer than ``tol`` and drop the collapsed triangles."""
    pairs = cKDTree(verts).query_pairs(tol, output_type="ndarray")
    n = len(verts)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, label = connected_components(graph, directed=False)
    faces = label[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    # collapses can leave back-to-back duplicate triangles enclosing no volume
    key = np.sort(faces, axis=1)
    _, first, counts = np.unique(key, axis=0, return_index=True, return_counts=True)
    faces = faces[np.sort(first[counts == 1])]
    merged = np.zeros((label.max() + 1, 3))
    np.add.at(merged, label, verts)
    merged /= np.bincount(label)[:, None]
    used, faces = np.unique(faces, return_inverse=True)
    return merged[used], faces.reshape(-1, 3)


def _smooth_min(a, b, k):
    h = np.maximum(k - np.abs(a - b), 0.0) / k
    return np.minimum(a, b) - h * h * k * 0.25


def box_mesh(lo, hi, divisions: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Closed axis-aligned box with each face split into ``divisions**2`` quads."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = int(divisions)
    verts: dict[tuple[int, int, int], int] = {}
    coords = []

    def vid(i, j, k):
        key = (i, j, k)
        if key not in verts:
            verts[key] = len(coords)
            coords.append(lo + (hi - lo) * np.array([i, j, k]) / n)
        return verts[key]

    tris = []
    for axis in range(3):
        u_ax, v_ax = [a for a in range(3) if a != axis]
        for side in (0, n):
            for a in range(n):
                for b in range(n):
                    quad = []
                    for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        idx = [0, 0, 0]
                        idx[axis] = side
                        idx[u_ax] = a + da
                        idx[v_ax] = b + db
                        quad.append(vid(*idx))
                    tris.append([quad[0], quad[1], quad[2]])
                    tris.append([quad[0], quad[2], quad[3]])
    return np.array(coords), np.array(tris, dtype=np.int64)


def tube_mesh(radius: float, z0: float, z1: float, sides: int = 48, rings: int = 40):
    """Closed cylinder along z with flat fan caps."""
    ang = 2 * np.pi * np.arange(sides) / sides
    zs = np.linspace(z0, z1, rings + 1)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    verts = [np.column_stack([ring, np.full(sides, z)]) for z in zs]
    verts = np.concatenate(verts + [np.array([[0.0, 0.0, z0], [0.0, 0.0, z1]])])
    bottom, top = len(verts) - 2, len(verts) - 1
    tris = []
    for r in range(rings):
        for s in range(sides):
            a = r * sides + s
            b = r * sides + (s + 1) % sides
            c = a + sides
            d = b + sides
            tris += [[a, b, d], [a, d, c]]
    for s in range(sides):
        tris.append([bottom, (s + 1) % sides, s])
        tris.append([top, rings * sides + s, rings * sides + (s + 1) % sides])
    return verts, np.array(tris, dtype=np.int64)
