import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoifit.geometry import (LabeledPointCloud, SpatialIndex, TriMesh, box_mesh, brute_force_closest,
                             build_index, chamfer, point_to_mesh_distance, sample_surface)
from hoifit.io import read_obj, read_ply, write_obj, write_ply


def unit_cube():
    return box_mesh((1.0, 1.0, 1.0), center=(0.5, 0.5, 0.5))


def tetrahedron():
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0],
                  [0.5, np.sqrt(3) / 6, np.sqrt(2.0 / 3.0)]])
    f = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [2, 0, 3]])
    return TriMesh(v, f)


def test_cube_axis_face_query():
    res = build_index(unit_cube()).query(np.array([[2.0, 0.5, 0.5]]))
    assert res.distances[0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(res.points[0], [1.0, 0.5, 0.5], atol=1e-12)


def test_query_at_vertex_is_zero():
    mesh = unit_cube()
    res = SpatialIndex(mesh).query(mesh.vertices[:5])
    np.testing.assert_allclose(res.distances, 0.0, atol=1e-12)


def test_random_queries_match_linear_scan(rng):
    mesh = tetrahedron()
    pts = rng.normal(0.3, 0.8, (1000, 3))
    fast = SpatialIndex(mesh).query(pts)
    slow = brute_force_closest(pts, mesh)
    np.testing.assert_allclose(fast.distances, slow.distances, atol=1e-9)


def test_tetrahedron_inradius():
    mesh = tetrahedron()
    d, _ = point_to_mesh_distance(mesh.vertices.mean(axis=0)[None], SpatialIndex(mesh))
    assert d[0] == pytest.approx(np.sqrt(6) / 12, abs=1e-12)


def test_point_above_edge_uses_edge_distance():
    mesh = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]]), np.array([[0, 1, 2], [1, 3, 2]]))
    p = np.array([[0.5, 0.5, 0.3]])
    d = SpatialIndex(mesh).query(p).distances[0]
    assert d == pytest.approx(0.3)
    # beyond the outer edge: distance to the edge, not to the extended plane
    p = np.array([[0.5, -0.4, 0.3]])
    assert SpatialIndex(mesh).query(p).distances[0] == pytest.approx(0.5)


def test_empty_mesh_rejected():
    with pytest.raises(ValueError):
        build_index(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


def test_degenerate_face_rejected():
    flat = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]), np.array([[0, 1, 2]]))
    with pytest.raises(ValueError):
        flat.validate()
    with pytest.raises(ValueError):
        sample_surface(flat, 10)


def test_chamfer_examples(rng):
    assert chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == pytest.approx(1.0)
    a = rng.random((100, 3))
    b = rng.random((100, 3))
    assert chamfer(a, a) == 0.0
    D = np.linalg.norm(a[:, None] - b[None], axis=2)
    expected = 0.5 * (D.min(axis=1).mean() + D.min(axis=0).mean())
    assert chamfer(a, b) == pytest.approx(expected, abs=1e-9)
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), abs=1e-15)
    with pytest.raises(ValueError):
        chamfer(a, np.zeros((0, 3)))


def test_sample_surface_area_weighting():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    mesh = TriMesh(v, f)
    pts, faces = sample_surface(mesh, 100_000, seed=3, return_faces=True)
    counts = np.bincount(faces, minlength=2)
    assert abs(counts[0] / 1e5 - 0.5) < 0.02 * 0.5
    one = sample_surface(mesh, 1, seed=0)
    assert SpatialIndex(mesh).query(one).distances[0] < 1e-12
    np.testing.assert_array_equal(sample_surface(mesh, 50, seed=9), sample_surface(mesh, 50, seed=9))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_distance_is_one_lipschitz(c):
    mesh = tetrahedron()
    p, q = np.array(c[:3]), np.array(c[3:])
    d = SpatialIndex(mesh).query(np.stack([p, q])).distances
    assert abs(d[0] - d[1]) <= np.linalg.norm(p - q) + 1e-12


def test_obj_and_ply_round_trip(tmp_path, rng):
    mesh = tetrahedron()
    write_obj(tmp_path / "m.obj", mesh)
    back = read_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-9)
    np.testing.assert_array_equal(back.faces, mesh.faces)
    cloud = LabeledPointCloud(rng.random((20, 3)), rng.integers(0, 2, 20).astype(np.uint8),
                              rng.integers(0, 4, 20).astype(np.uint8))
    write_ply(tmp_path / "c.ply", cloud)
    got = read_ply(tmp_path / "c.ply")
    np.testing.assert_allclose(got.points, cloud.points, atol=1e-9)
    np.testing.assert_array_equal(got.labels, cloud.labels)
    np.testing.assert_array_equal(got.cameras, cloud.cameras)
