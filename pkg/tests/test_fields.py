import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoifit.bodymodel import BodyEvaluation, SurfaceBinding
from hoifit.errors import AmbiguousOrientation, NoNearSurfacePoints
from hoifit.fields import (FieldSamples, OracleFieldProvider, aggregate_orientation, canonicalize_axes,
                           compute_orientation, oracle_fields, read_field_dump, relative_rotation,
                           write_field_dump)
from hoifit.geometry import box_mesh, brute_force_closest, sample_surface
from hoifit.rotation import geodesic_angle, random_rotation


@pytest.fixture(scope="module")
def oracle(grasp_frame):
    f = grasp_frame
    return OracleFieldProvider(f.body_mesh, f.template.vertices, f.object_mesh)


def test_query_on_body_surface(grasp_frame, oracle):
    f = grasp_frame
    tpl = f.template
    rng = np.random.default_rng(0)
    faces = rng.integers(0, len(tpl.faces), 20)
    bary = rng.dirichlet(np.ones(3), 20)
    posed = np.einsum("nk,nkc->nc", bary, f.body_mesh.vertices[tpl.faces[faces]])
    canon = np.einsum("nk,nkc->nc", bary, tpl.vertices[tpl.faces[faces]])
    s = oracle.query(posed)
    np.testing.assert_allclose(s.u_h, 0.0, atol=1e-9)
    np.testing.assert_allclose(s.c, canon, atol=1e-9)


def test_unit_cube_distance():
    cube = box_mesh((1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0))
    body = box_mesh((0.2, 0.2, 0.2), center=(5.0, 0.0, 0.0))
    s = oracle_fields(np.array([[0.6, 0.1, -0.2]]), body, body.vertices, cube)
    assert s.u_o[0] == pytest.approx(0.1, abs=1e-12)


def test_oracle_matches_brute_force(grasp_frame, oracle):
    f = grasp_frame
    rng = np.random.default_rng(1)
    lo, hi = f.cloud.points.min(axis=0), f.cloud.points.max(axis=0)
    pts = lo + rng.random((500, 3)) * (hi - lo)
    s = oracle.query(pts)
    np.testing.assert_allclose(s.u_h, brute_force_closest(pts, f.body_mesh).distances, atol=1e-9)
    bo = brute_force_closest(pts, f.object_mesh)
    np.testing.assert_allclose(s.u_o, bo.distances, atol=1e-9)
    # correspondences skin back onto the closest posed body point
    ev = BodyEvaluation(f.template, f.body_params, grad=False)
    back = ev.points(SurfaceBinding.canonical_points(f.template, s.c))
    closest = brute_force_closest(pts, f.body_mesh).points
    assert np.max(np.linalg.norm(back - closest, axis=1)) < 1e-6
    a = s.a.reshape(-1, 3, 3)
    np.testing.assert_allclose(np.linalg.norm(a, axis=2), 1.0, atol=1e-6)


def test_box_orientation_axes():
    A = compute_orientation(box_mesh((3.0, 2.0, 1.0), spacing=0.25).vertices)
    np.testing.assert_allclose(np.abs(A), np.eye(3), atol=1e-9)
    np.testing.assert_allclose(A, np.eye(3), atol=1e-9)


def test_orientation_equivariance(rng):
    v = box_mesh((3.0, 2.0, 1.0), spacing=0.25).vertices
    v = np.concatenate([v, [[1.4, 0.9, 0.45]]])  # break the mirror symmetry
    A = compute_orientation(v)
    for _ in range(10):
        R = random_rotation(rng)
        rv = v @ R.T
        expected = canonicalize_axes(A @ R.T, rv)
        assert geodesic_angle(compute_orientation(rv), expected) < 1e-6


def test_sphere_is_ambiguous(rng):
    p = rng.normal(size=(5000, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    with pytest.raises(AmbiguousOrientation):
        compute_orientation(p)


def test_relative_rotation_examples(rng):
    A = compute_orientation(box_mesh((3.0, 2.0, 1.0), spacing=0.25).vertices)
    np.testing.assert_allclose(relative_rotation(A, A), np.eye(3), atol=1e-12)
    for _ in range(100):
        R = random_rotation(rng)
        C = random_rotation(rng)  # rows are orthonormal axes
        got = relative_rotation((R @ C.T).T, C)
        assert geodesic_angle(got, R) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relative_rotation_always_orthonormal(seed):
    r = np.random.default_rng(seed)
    C = random_rotation(r)
    P = random_rotation(r) + r.normal(0, 0.05, (3, 3))
    R = relative_rotation(P, C)
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_relative_rotation_singular_rejected():
    with pytest.raises(ValueError):
        relative_rotation(np.eye(3), np.zeros((3, 3)))


def _samples(u_o, a):
    n = len(u_o)
    return FieldSamples(np.zeros(n), np.asarray(u_o, float), np.zeros((n, 3)), np.asarray(a, float))


def test_aggregate_orientation_filtering(rng):
    a = np.tile(np.eye(3).ravel(), (6, 1))
    np.testing.assert_array_equal(aggregate_orientation(_samples(np.zeros(6), a)), np.eye(3))
    garbage = a.copy()
    garbage[3:] = rng.normal(0, 10, (3, 9))
    u = np.array([0.0, 0.01, 0.015, 0.05, 0.05, 0.05])
    np.testing.assert_array_equal(aggregate_orientation(_samples(u, garbage), 0.02), np.eye(3))
    mixed = rng.normal(size=(40, 9))
    u = rng.uniform(0, 0.04, 40)
    expected = mixed[u < 0.02].mean(axis=0).reshape(3, 3)
    np.testing.assert_allclose(aggregate_orientation(_samples(u, mixed), 0.02), expected, atol=1e-12)
    perm = rng.permutation(40)
    np.testing.assert_allclose(aggregate_orientation(_samples(u[perm], mixed[perm]), 0.02), expected,
                               atol=1e-12)
    with pytest.raises(NoNearSurfacePoints):
        aggregate_orientation(_samples(np.full(3, 0.5), mixed[:3]), 0.02)


def test_field_dump_round_trip(grasp_frame, oracle):
    pts = sample_surface(grasp_frame.object_mesh, 10, seed=0)
    s = oracle.query(pts)
    buf = io.StringIO()
    write_field_dump(buf, pts, s)
    buf.seek(0)
    p2, s2 = read_field_dump(buf)
    np.testing.assert_allclose(p2, pts, rtol=1e-8)
    np.testing.assert_allclose(s2.a, s.a, atol=1e-8)


def test_oracle_is_deterministic(grasp_frame, oracle):
    pts = sample_surface(grasp_frame.body_mesh, 50, seed=2) + 0.01
    a, b = oracle.query(pts), oracle.query(pts)
    np.testing.assert_array_equal(a.u_h, b.u_h)
    np.testing.assert_array_equal(a.c, b.c)
