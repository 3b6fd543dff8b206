"""Rigid vessel-wall meshes and the signed penetration queries used as contact constraints."""

from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

_TIE_CANDIDATES = 8


class MeshError(ValueError):
    """Raised for unreadable, open or degenerate meshes."""

    def __init__(self, message: str, boundary_edges: int = 0):
        super().__init__(message)
        self.boundary_edges = boundary_edges


@dataclass(frozen=True)
class RigidPose:
    """Perturbation of the anatomy on the coronal (x-z) plane.

    ``lateral`` (a) shifts along x, ``axial`` (b) along z, both in meters;
    ``rotation_deg`` (alpha) rotates about the +y axis through the tool origin.
    """

    lateral: float = 0.0
    axial: float = 0.0
    rotation_deg: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        a = np.deg2rad(self.rotation_deg)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.lateral, 0.0, self.axial])

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    @property
    def is_identity(self) -> bool:
        return self.lateral == 0.0 and self.axial == 0.0 and self.rotation_deg == 0.0


@dataclass(frozen=True, eq=False)
class AnatomyMesh:
    """Closed triangulated vessel wall with inward unit normals.

    Triangles are stored wound so that the right-hand normal points into the
    vessel lumen. ``index`` is a k-d tree over the triangle centroids.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    centroids: np.ndarray
    normals: np.ndarray
    index: cKDTree

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def edge_lengths(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return np.linalg.norm(v - np.roll(v, -1, axis=1), axis=-1).ravel()

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def report(self) -> dict:
        lo, hi = self.bounding_box()
        edges = self.edge_lengths()
        return {
            "triangle_count": int(self.triangle_count),
            "vertex_count": int(len(self.vertices)),
            "closed": True,
            "boundary_edges": 0,
            "bbox_min_m": lo.tolist(),
            "bbox_max_m": hi.tolist(),
            "max_edge_m": float(edges.max()),
            "median_edge_m": float(np.median(edges)),
        }


# ---------------------------------------------------------------- STL I/O


def read_stl(path) -> np.ndarray:
    """Triangle soup of shape (n, 3, 3) from a binary or ASCII STL file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc
    if len(data) >= 84:
        (n,) = struct.unpack("<I", data[80:84])
        if len(data) == 84 + 50 * n:
            rec = np.frombuffer(
                data, offset=84, count=n,
                dtype=np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")]),
            )
            return rec["v"].astype(float)
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MeshError(f"{path} is neither binary nor ASCII STL") from exc
    if not text.lstrip().lower().startswith("solid"):
        raise MeshError(f"{path} is neither binary nor ASCII STL")
    coords = [
        [float(x) for x in line.split()[1:4]]
        for line in text.splitlines()
        if line.strip().lower().startswith("vertex")
    ]
    if not coords or len(coords) % 3:
        raise MeshError(f"{path}: malformed ASCII STL ({len(coords)} vertices)")
    return np.asarray(coords, dtype=float).reshape(-1, 3, 3)


def write_stl(path, vertices, triangles, ascii: bool = False) -> None:
    tri = np.asarray(vertices, dtype=float)[np.asarray(triangles)]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, norm, out=np.zeros_like(normals), where=norm > 0)
    path = Path(path)
    if ascii:
        lines = ["solid mesh"]
        for n, t in zip(normals, tri):
            lines.append(f"  facet normal {n[0]:e} {n[1]:e} {n[2]:e}")
            lines.append("    outer loop")
            lines.extend(f"      vertex {v[0]:.9e} {v[1]:.9e} {v[2]:.9e}" for v in t)
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append("endsolid mesh")
        path.write_text("\n".join(lines) + "\n")
        return
    rec = np.zeros(
        len(tri), dtype=np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    )
    rec["normal"] = normals
    rec["v"] = tri
    with open(path, "wb") as fh:
        fh.write(b"endonav binary stl".ljust(80, b" "))
        fh.write(struct.pack("<I", len(tri)))
        fh.write(rec.tobytes())


# ---------------------------------------------------------------- topology


def _weld(soup: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = soup.reshape(-1, 3)
    verts, inverse = np.unique(flat, axis=0, return_inverse=True)
    return verts, inverse.reshape(-1, 3)


def _edge_table(triangles: np.ndarray):
    """Directed edges, their undirected keys and owning triangle."""
    directed = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    owner = np.tile(np.arange(len(triangles)), 3)
    key = np.sort(directed, axis=1)
    return directed, key, owner


def boundary_edge_count(triangles: np.ndarray) -> int:
    """Number of undirected edges not shared by exactly two triangles."""
    _, key, _ = _edge_table(np.asarray(triangles))
    _, counts = np.unique(key, axis=0, return_counts=True)
    return int(np.sum(counts != 2))


def _orient_consistently(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip triangles so neighbours traverse shared edges in opposite directions.

    Returns the re-wound triangles and a component label per triangle.
    """
    directed, key, owner = _edge_table(triangles)
    order = np.lexsort((key[:, 1], key[:, 0]))
    k_sorted = key[order]
    same = np.all(k_sorted[1:] == k_sorted[:-1], axis=1)
    first = order[:-1][same]
    second = order[1:][same]
    t1, t2 = owner[first], owner[second]
    # both directed the same way means the pair needs opposite flips
    parity = np.all(directed[first] == directed[second], axis=1)

    n = len(triangles)
    adjacency: list[list[tuple[int, bool]]] = [[] for _ in range(n)]
    for a, b, p in zip(t1.tolist(), t2.tolist(), parity.tolist()):
        adjacency[a].append((b, p))
        adjacency[b].append((a, p))

    flip = np.zeros(n, dtype=bool)
    label = np.full(n, -1)
    comp = 0
    for seed in range(n):
        if label[seed] >= 0:
            continue
        label[seed] = comp
        queue = deque([seed])
        while queue:
            t = queue.popleft()
            for nb, p in adjacency[t]:
                if label[nb] < 0:
                    label[nb] = comp
                    flip[nb] = flip[t] ^ p
                    queue.append(nb)
        comp += 1
    out = triangles.copy()
    out[flip] = out[flip][:, [0, 2, 1]]
    return out, label


def _assemble(vertices: np.ndarray, triangles: np.ndarray) -> AnatomyMesh:
    tri = vertices[triangles]
    centroids = tri.mean(axis=1)
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    for a in (vertices, triangles, centroids, normals):
        a.setflags(write=False)
    return AnatomyMesh(vertices, triangles, centroids, normals, cKDTree(centroids))


def mesh_from_arrays(vertices, triangles) -> AnatomyMesh:
    """Validate a closed indexed mesh and orient every normal into the volume."""
    vertices = np.array(vertices, dtype=float)
    triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles) == 0:
        raise MeshError("mesh has no triangles")
    tri = vertices[triangles]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    scale = np.ptp(vertices, axis=0).max()
    bad = area2 <= 1e-12 * scale**2
    if np.any(bad):
        raise MeshError(f"{int(bad.sum())} degenerate (zero-area) triangles")
    open_edges = boundary_edge_count(triangles)
    if open_edges:
        raise MeshError(
            f"mesh is not closed: {open_edges} edges not shared by exactly two triangles",
            boundary_edges=open_edges,
        )
    triangles, label = _orient_consistently(triangles)
    tri = vertices[triangles]
    vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))
    comp_volume = np.bincount(label, weights=vol)
    # positive volume means right-hand normals point outward
    outward = comp_volume[label] > 0
    triangles[outward] = triangles[outward][:, [0, 2, 1]]
    return _assemble(vertices, triangles)


def load_mesh(path, units_scale: float = 1e-3, segment_length: float | None = None) -> AnatomyMesh:
    """Load an STL vessel wall; coordinates are multiplied by ``units_scale``.

    With ``segment_length`` given, a warning is logged when the mesh is too
    coarse for the centroid-based nearest-triangle rule.
    """
    soup = read_stl(path) * units_scale
    if len(soup) == 0:
        raise MeshError(f"{path}: empty mesh")
    vertices, triangles = _weld(soup)
    mesh = mesh_from_arrays(vertices, triangles)
    if segment_length is not None:
        for msg in resolution_warnings(mesh, segment_length):
            log.warning(msg)
    return mesh


def resolution_warnings(mesh: AnatomyMesh, segment_length: float) -> list[str]:
    longest = mesh.edge_lengths().max()
    if longest > 2.0 * segment_length:
        return [
            f"max edge length {longest * 1e3:.3f} mm exceeds twice the segment length "
            f"({2e3 * segment_length:.3f} mm); centroid-nearest contact may be inaccurate"
        ]
    return []


# ---------------------------------------------------------------- queries


def nearest_triangle_bruteforce(mesh: AnatomyMesh, points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d2 = np.sum((mesh.centroids[None, :, :] - pts[:, None, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=1)


def nearest_triangle(mesh: AnatomyMesh, point):
    """Index of the triangle whose centroid is closest; ties go to the lowest index.

    Accepts one point (returns an int) or an (n, 3) array (returns an array).
    """
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    k = min(_TIE_CANDIDATES, mesh.triangle_count)
    _, idx = mesh.index.query(pts, k=k)
    idx = idx.reshape(len(pts), k)
    cand = mesh.centroids[idx]
    d2 = np.sum((cand - pts[:, None, :]) ** 2, axis=-1)
    best = d2.min(axis=1)
    tied = d2 <= best[:, None]
    choice = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
    # the tie set may extend past the candidate list
    spill = (d2[:, -1] <= best * (1 + 1e-9)) & (k < mesh.triangle_count)
    if np.any(spill):
        choice[spill] = nearest_triangle_bruteforce(mesh, pts[spill])
    return int(choice[0]) if single else choice


def penetration_and_normal(mesh: AnatomyMesh, points):
    """Signed penetration of each point and the normal of its nearest triangle."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    k = nearest_triangle(mesh, pts)
    normals = mesh.normals[k]
    d = np.einsum("ij,ij->i", pts - mesh.centroids[k], normals)
    return d, normals


def signed_penetration(mesh: AnatomyMesh, point):
    """Projection of ``point - s_k`` on the inward normal ``h_k``; positive inside."""
    pts = np.asarray(point, dtype=float)
    d, _ = penetration_and_normal(mesh, pts)
    return float(d[0]) if pts.ndim == 1 else d


def signed_penetration_bruteforce(mesh: AnatomyMesh, points) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    k = nearest_triangle_bruteforce(mesh, pts)
    return np.einsum("ij,ij->i", pts - mesh.centroids[k], mesh.normals[k])


def transform_mesh(mesh: AnatomyMesh, pose: RigidPose) -> AnatomyMesh:
    """Move the anatomy rigidly; the tool frame stays put."""
    if pose.is_identity:
        return mesh
    rot = pose.rotation
    vertices = mesh.vertices @ rot.T + pose.translation
    centroids = mesh.centroids @ rot.T + pose.translation
    normals = mesh.normals @ rot.T
    for a in (vertices, centroids, normals):
        a.setflags(write=False)
    return AnatomyMesh(vertices, mesh.triangles, centroids, normals, cKDTree(centroids))


def points_inside(mesh: AnatomyMesh, points, direction=(0.5773, 0.5774, 0.5773)) -> np.ndarray:
    """Ray-parity inside test (Moller-Trumbore against every triangle)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    tri = mesh.vertices[mesh.triangles]
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-30
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    out = np.empty(len(pts), dtype=bool)
    for n, p in enumerate(pts):
        tvec = p - v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        out[n] = bool(np.count_nonzero(hit) % 2)
    return out
