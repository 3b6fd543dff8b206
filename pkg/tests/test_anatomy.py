import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endonav.anatomy import (
    MeshError,
    RigidPose,
    load_mesh,
    mesh_from_arrays,
    nearest_triangle,
    nearest_triangle_bruteforce,
    points_inside,
    resolution_warnings,
    signed_penetration,
    signed_penetration_bruteforce,
    transform_mesh,
    write_stl,
)
from endonav.phantom import box_mesh, tube_mesh


def test_cube_normals_point_to_center(cube):
    assert cube.triangle_count == 12
    assert np.allclose(np.linalg.norm(cube.normals, axis=1), 1.0, atol=1e-9)
    to_center = -cube.centroids
    assert np.all(np.einsum("ij,ij->i", cube.normals, to_center) > 0)
    assert np.allclose(cube.centroids, cube.vertices[cube.triangles].mean(axis=1))


def test_flipped_winding_gives_same_normals(cube):
    v, t = box_mesh((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), 1)
    flipped = mesh_from_arrays(v, t[:, ::-1])
    assert np.allclose(flipped.normals, cube.normals)
    # mixed winding is repaired too
    mixed = t.copy()
    mixed[::3] = mixed[::3, ::-1]
    assert np.allclose(mesh_from_arrays(v, mixed).normals, cube.normals)


def test_tube_wall_normals_are_horizontal(tube):
    lateral = np.abs(tube.normals[:, 2]) < 0.5
    assert lateral.sum() > 0
    assert np.max(np.abs(tube.normals[lateral, 2])) < 1e-6
    radial = tube.centroids[lateral, :2]
    # inward: opposite to the radial direction
    assert np.all(np.einsum("ij,ij->i", tube.normals[lateral, :2], radial) < 0)


def test_nearest_face(cube):
    k = nearest_triangle(cube, [0, 0, 0.4])
    assert np.isclose(cube.centroids[k, 2], 0.5)


def test_ties_go_to_lowest_index(cube):
    # each face centre is equidistant from the centroids of that face's two triangles
    for axis in range(3):
        for side in (-0.5, 0.5):
            p = np.zeros(3)
            p[axis] = side
            d2 = np.sum((cube.centroids - p) ** 2, axis=1)
            tied = np.flatnonzero(np.isclose(d2, d2.min(), rtol=0, atol=1e-15))
            assert len(tied) == 2
            assert nearest_triangle(cube, p) == tied.min()


def test_exact_ties_in_large_candidate_sets():
    # 16 coplanar triangles with centroids on a circle around the query point
    ang = 2 * np.pi * np.arange(16) / 16
    v, t = tube_mesh(1.0, 0.0, 1.0, sides=16, rings=1)
    m = mesh_from_arrays(v, t)
    p = np.array([0.0, 0.0, 0.0])
    assert nearest_triangle(m, p) == nearest_triangle_bruteforce(m, p)[0]
    assert len(ang) == 16


def test_index_agrees_with_bruteforce(phantom_mesh):
    rng = np.random.default_rng(0)
    lo, hi = phantom_mesh.bounding_box()
    pts = rng.uniform(lo, hi, size=(1000, 3))
    assert np.array_equal(nearest_triangle(phantom_mesh, pts), nearest_triangle_bruteforce(phantom_mesh, pts))
    assert np.array_equal(signed_penetration(phantom_mesh, pts), signed_penetration_bruteforce(phantom_mesh, pts))


def test_signed_penetration_examples(cube):
    assert signed_penetration(cube, [0, 0, 0]) == pytest.approx(0.5, abs=1e-15)
    assert abs(signed_penetration(cube, [0, 0, 0.6]) + 0.1) < 1e-12
    assert signed_penetration(cube, cube.centroids[5]) == 0.0


def test_inward_orientation_by_ray_parity(phantom_mesh):
    rng = np.random.default_rng(1)
    lo, hi = phantom_mesh.bounding_box()
    pts = rng.uniform(lo, hi, size=(3000, 3))
    inside = points_inside(phantom_mesh, pts)
    d = signed_penetration(phantom_mesh, pts)
    interior = d[inside][:100]
    assert len(interior) == 100
    assert np.mean(interior > 0) >= 0.99
    assert np.all(d[~inside] < 0)


def test_identity_pose_keeps_geometry(cube):
    moved = transform_mesh(cube, RigidPose())
    assert np.array_equal(moved.vertices, cube.vertices)
    assert np.array_equal(moved.normals, cube.normals)


def test_lateral_shift(cube):
    moved = transform_mesh(cube, RigidPose(lateral=0.01))
    assert np.allclose(moved.centroids - cube.centroids, [0.01, 0, 0], atol=1e-15)


def test_rotation_is_rigid(phantom_mesh):
    moved = transform_mesh(phantom_mesh, RigidPose(rotation_deg=10.0))
    sel = np.arange(0, phantom_mesh.triangle_count, 97)
    a = phantom_mesh.centroids[sel]
    b = moved.centroids[sel]
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    assert np.max(np.abs(da - db)) < 1e-9
    assert np.allclose(np.linalg.det(RigidPose(rotation_deg=10.0).rotation), 1.0)


@settings(max_examples=30, deadline=None)
@given(
    st.floats(-0.01, 0.01), st.floats(-0.01, 0.01), st.floats(-15, 15),
    st.lists(st.floats(-0.012, 0.012), min_size=3, max_size=3),
)
def test_penetration_is_pose_invariant(tube, a, b, alpha, p):
    pose = RigidPose(a, b, alpha)
    p = np.array(p) + [0, 0, 0.03]
    moved = transform_mesh(tube, pose)
    assert abs(signed_penetration(moved, pose.apply(p)) - signed_penetration(tube, p)) < 1e-9


@pytest.mark.parametrize("ascii", [False, True])
def test_stl_round_trip(tmp_path, ascii):
    v, t = box_mesh((0, 0, 0), (10, 20, 30), 2)
    path = tmp_path / "box.stl"
    write_stl(path, v, t, ascii=ascii)
    m = load_mesh(path, units_scale=1e-3)
    assert m.triangle_count == len(t)
    lo, hi = m.bounding_box()
    assert np.allclose(lo, 0, atol=1e-9) and np.allclose(hi, [0.01, 0.02, 0.03], atol=1e-9)
    assert signed_penetration(m, [0.005, 0.01, 0.015]) == pytest.approx(0.005, abs=1e-9)


def test_open_mesh_reports_boundary_edges(tmp_path):
    v, t = box_mesh((0, 0, 0), (1, 1, 1), 1)
    path = tmp_path / "open.stl"
    write_stl(path, v, t[:-1])
    with pytest.raises(MeshError) as err:
        load_mesh(path, 1.0)
    assert err.value.boundary_edges == 3
    assert "not closed" in str(err.value)


def test_degenerate_triangle_rejected():
    v, t = box_mesh((0, 0, 0), (1, 1, 1), 1)
    v = np.vstack([v, [[0.5, 0.5, 0.0]]])
    bad = np.vstack([t, [[0, 1, len(v) - 1]]])
    bad[0, 1] = bad[0, 0]
    with pytest.raises(MeshError, match="degenerate"):
        mesh_from_arrays(v, bad)


def test_unreadable_file(tmp_path):
    with pytest.raises(MeshError):
        load_mesh(tmp_path / "missing.stl")
    junk = tmp_path / "junk.stl"
    junk.write_bytes(b"\xff\xfe not an stl")
    with pytest.raises(MeshError):
        load_mesh(junk)


def test_resolution_warning(cube):
    assert resolution_warnings(cube, 1.0) == []
    assert resolution_warnings(cube, 0.1)
