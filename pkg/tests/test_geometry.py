import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avtwin.geometry import (RAY_EPS, GeometryError, Pose, TriMesh, box_mesh, cast_rays,
                             quat_from_axis_angle, ray_cast_first_hit, segment_mesh, shoebox_mesh,
                             sphere_directions)
from avtwin.scenes import shoebox_scene


def brute_first_hit(tri, o, d, tmin=RAY_EPS):
    """Moller-Trumbore against every triangle; (t, face) with inf / -1 on a miss."""
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = o - v0
        u = np.einsum("ij,ij->i", s, p) * inv
        q = np.cross(s, e1)
        v = (q @ d) * inv
        t = np.einsum("ij,ij->i", e2, q) * inv
    ok = (np.abs(det) > 1e-14) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > tmin)
    if not ok.any():
        return np.inf, -1
    t = np.where(ok, t, np.inf)
    f = int(np.argmin(t))
    return float(t[f]), f


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------- poses / meshes

def test_pose_orientation_must_be_unit():
    with pytest.raises(GeometryError):
        Pose(np.zeros(3), np.array([1.0, 0.1, 0.0, 0.0]))
    p = Pose(np.zeros(3), quat_from_axis_angle([0, 0, 1], np.pi / 2))
    # a world +y direction is local +x after a quarter turn about z
    np.testing.assert_allclose(p.to_local([0.0, 1.0, 0.0]), [1.0, 0.0, 0.0], atol=1e-12)
    assert Pose.from_dict(p.to_dict()).orientation == pytest.approx(p.orientation)


def test_mesh_drops_degenerate_faces_and_checks_indices():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], float)
    m = TriMesh(v, [[0, 1, 2], [0, 1, 3]])  # second face is collinear
    assert m.n_faces == 1
    np.testing.assert_allclose(np.linalg.norm(m.face_normals, axis=1), 1.0)
    with pytest.raises(GeometryError):
        TriMesh(v, [[0, 1, 7]])


# ---------------------------------------------------------------- ray casting

def test_ray_from_cube_centre():
    cube = box_mesh([-0.5] * 3, [0.5] * 3, inward=True)
    h = ray_cast_first_hit(cube, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(h.point, [0.5, 0.0, 0.0], atol=1e-12)
    assert h.distance == pytest.approx(0.5, abs=1e-12)


def test_parallel_ray_misses_plane():
    floor = TriMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    assert ray_cast_first_hit(floor, [0.5, 0.5, 1.0], [1.0, 0.0, 0.0]) is None
    assert ray_cast_first_hit(floor, [0.5, 0.5, 1.0], [0.0, 0.0, 1.0]) is None  # pointing away
    with pytest.raises(GeometryError):
        ray_cast_first_hit(floor, [0.5, 0.5, 1.0], [0.0, 0.0, -2.0])


def test_bvh_matches_brute_force_scan():
    scene = shoebox_scene((4.0, 5.0, 3.0), subdiv=3)
    # a box inside the room so rays also hit occluders from both sides
    mesh = scene.mesh.merged(box_mesh([1.5, 2.0, 0.0], [2.5, 3.0, 0.8]))
    rng = np.random.default_rng(0)
    n = 10_000
    o = rng.uniform([0.1, 0.1, 0.1], [3.9, 4.9, 2.9], (n, 3))
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t, f = cast_rays(mesh, o, d)
    tri = mesh.triangles
    for i in range(n):
        tb, fb = brute_first_hit(tri, o[i], d[i])
        assert t[i] == pytest.approx(tb, abs=1e-9)
        if fb != f[i]:
            # ties on a shared edge: both faces must give the same distance
            assert brute_first_hit(tri[[f[i]]], o[i], d[i])[0] == pytest.approx(tb, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 3.95), st.floats(0.05, 4.95), st.floats(0.05, 2.95),
       st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_hit_lies_on_face_plane(x, y, z, a, b, c):
    d = np.array([a, b, c])
    if np.linalg.norm(d) < 1e-3:
        return
    mesh = shoebox_mesh((4.0, 5.0, 3.0), subdiv=2)
    h = ray_cast_first_hit(mesh, [x, y, z], unit(d))
    assert h is not None and h.distance >= 0
    n = mesh.face_normals[h.face]
    assert abs((h.point - mesh.triangles[h.face, 0]) @ n) <= 1e-6


def test_empty_mesh_casts_to_misses():
    t, f = cast_rays(None, np.zeros((2, 3)), np.eye(3)[:2])
    assert np.all(np.isinf(t)) and np.all(f == -1)


# ---------------------------------------------------------------- segmentation

def test_six_uniform_walls():
    mesh = shoebox_mesh((4.0, 5.0, 3.0), subdiv=3)
    assert len(segment_mesh(mesh, normal_tol=10.0)) == 6


def test_two_colour_wall_gives_seven_segments():
    mesh = shoebox_mesh((4.0, 5.0, 3.0), subdiv=4)
    cols = mesh.face_colors.copy()
    c = mesh.centroids
    # the floor (z = 0) gets a second colour on its x < 2 half
    half = (np.abs(c[:, 2]) < 1e-9) & (c[:, 0] < 2.0)
    cols[half] = [0.1, 0.1, 0.1]
    mesh = TriMesh(mesh.vertices, mesh.faces, cols)
    segs = segment_mesh(mesh, color_tol=0.15, normal_tol=10.0)
    assert len(segs) == 7
    assert any(set(s.faces) == set(np.flatnonzero(half)) for s in segs)


def test_infinite_tolerance_gives_one_segment():
    mesh = shoebox_mesh((4.0, 5.0, 3.0), subdiv=2)
    assert len(segment_mesh(mesh, color_tol=np.inf, normal_tol=180.0)) == 1


def _partition(segs):
    return sorted(tuple(s.faces.tolist()) for s in segs)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-np.pi, np.pi), min_size=3, max_size=3),
       st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.integers(0, 2 ** 16))
def test_segmentation_partition_and_rigid_invariance(angles, shift, seed):
    rng = np.random.default_rng(seed)
    mesh = shoebox_mesh((3.0, 4.0, 2.5), subdiv=2)
    # random palette per face: some merge, some do not
    palette = rng.uniform(0, 1, (3, 3))
    mesh = TriMesh(mesh.vertices, mesh.faces, palette[rng.integers(0, 3, mesh.n_faces)])
    segs = segment_mesh(mesh)
    allf = np.concatenate([s.faces for s in segs])
    assert sorted(allf.tolist()) == list(range(mesh.n_faces))
    q = quat_from_axis_angle([1, 0, 0], angles[0])
    rot = Pose(np.zeros(3), q).rotation @ Pose(np.zeros(3), quat_from_axis_angle([0, 1, 0.3], angles[1])).rotation
    moved = mesh.transformed(rot, shift)
    assert _partition(segment_mesh(moved)) == _partition(segs)


# ---------------------------------------------------------------- directions

def test_single_direction():
    d = sphere_directions(1)
    assert d.shape == (1, 3)
    assert np.linalg.norm(d[0]) == pytest.approx(1.0, abs=1e-12)


def test_zero_directions_rejected():
    with pytest.raises(GeometryError):
        sphere_directions(0)


def test_direction_spacing_near_uniform():
    k = 1024
    d = sphere_directions(k)
    ang = np.arccos(np.clip(d @ d.T, -1, 1))
    np.fill_diagonal(ang, np.inf)
    nn = ang.min(axis=1)
    # hexagonal packing of k caps on the unit sphere
    ideal = np.sqrt(8 * np.pi / (np.sqrt(3) * k))
    assert np.all(np.abs(nn / ideal - 1) <= 0.3)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5000))
def test_directions_unit_and_balanced(k):
    d = sphere_directions(k)
    assert np.all(np.abs(np.linalg.norm(d, axis=1) - 1) <= 1e-9)
    if k >= 64:
        assert np.linalg.norm(d.mean(axis=0)) <= 0.02
    np.testing.assert_array_equal(d, sphere_directions(k))
