import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avgrasp.geometry import (
    CameraIntrinsics,
    RigidTransform,
    compose,
    estimate_normals,
    invert,
    median_valid_depth,
    project,
    unproject,
    unproject_points,
)


def random_transform(rng):
    axis = rng.normal(size=3)
    angle = rng.uniform(-math.pi, math.pi)
    t = rng.uniform(-1, 1, size=3)
    return RigidTransform.from_axis_angle(axis, angle, t)


def rot_z(deg):
    return RigidTransform.from_axis_angle([0, 0, 1], math.radians(deg))


class TestRigidTransform:
    def test_compose_identity(self):
        rng = np.random.default_rng(0)
        t = random_transform(rng)
        r = compose(t, RigidTransform.identity())
        assert np.allclose(r.matrix(), t.matrix(), atol=1e-12)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        t = random_transform(rng)
        r = compose(t, invert(t))
        assert np.allclose(r.matrix(), np.eye(4), atol=1e-6)

    def test_rotation_composition_matches_matrix_product(self):
        # oracle: direct matrix multiplication
        a, b = rot_z(90), rot_z(90)
        expected = a.rotation @ b.rotation
        got = compose(a, b)
        assert np.allclose(got.rotation, expected, atol=1e-12)
        assert np.allclose(got.rotation, rot_z(180).rotation, atol=1e-12)

    def test_orthonormality_of_constructors(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            t = random_transform(rng)
            assert t.is_valid()
        q = rng.normal(size=4)
        t = RigidTransform.from_quaternion(*q)
        assert t.is_valid()

    def test_apply_order(self):
        # compose(a, b) applies b first
        a = RigidTransform.translate(1, 0, 0)
        b = rot_z(90)
        p = np.array([1.0, 0.0, 0.0])
        assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            RigidTransform(np.full((3, 3), np.nan), np.zeros(3))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_composition_associative(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (random_transform(rng) for _ in range(3))
        lhs = compose(compose(a, b), c)
        rhs = compose(a, compose(b, c))
        assert np.allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)


@pytest.fixture
def k():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=40.0, cy=30.0, width=80, height=60)


class TestProjection:
    def test_principal_point(self, k):
        depth = np.zeros((60, 80), dtype=np.float32)
        depth[30, 40] = 0.5
        pts = unproject_points(depth, k)
        assert pts.shape == (1, 3)
        assert np.allclose(pts[0], [0.0, 0.0, 0.5], atol=1e-7)

    def test_pinhole_formula(self, k):
        depth = np.zeros((60, 80), dtype=np.float32)
        depth[30, 60] = 0.5  # u - cx = 20, fx = 100 -> x = 0.1
        pts = unproject_points(depth, k)
        assert np.allclose(pts[0], [0.1, 0.0, 0.5], atol=1e-7)

    def test_invalid_depth_skipped(self, k):
        depth = np.zeros((60, 80), dtype=np.float32)
        assert unproject_points(depth, k).shape == (0, 3)

    def test_dimension_mismatch(self, k):
        with pytest.raises(ValueError):
            unproject(np.zeros((10, 10), dtype=np.float32), k)

    def test_round_trip(self, k):
        rng = np.random.default_rng(3)
        depth = rng.uniform(0.2, 2.0, size=(60, 80)).astype(np.float32)
        pts, valid = unproject(depth, k)
        u, v, z = project(pts[valid], k)
        uu, vv = np.meshgrid(np.arange(80), np.arange(60))
        assert np.allclose(u, uu[valid], atol=1e-4)
        assert np.allclose(v, vv[valid], atol=1e-4)
        assert np.allclose(z, depth[valid])


class TestNormals:
    def test_frontoparallel_plane(self, k):
        depth = np.full((60, 80), 0.7, dtype=np.float32)
        n = estimate_normals(depth, k)
        inner = n[1:-1, 1:-1]
        assert np.allclose(inner, [0, 0, -1], atol=1e-4)

    def test_tilted_plane(self, k):
        # plane tilted 45 deg about the camera x-axis: z = 0.7 + y
        vv = (np.arange(60, dtype=np.float64)[:, None] - k.cy) * np.ones((1, 80))
        depth = (0.7 / (1.0 - vv / k.fy)).astype(np.float32)
        n = estimate_normals(depth, k)
        center = n[30, 40]
        s = math.sqrt(2) / 2
        assert np.allclose(np.abs(center[1]), s, atol=1e-2)
        assert np.allclose(center[2], -s, atol=1e-2)
        assert abs(center[0]) < 1e-3

    def test_isolated_pixel_invalid(self, k):
        depth = np.zeros((60, 80), dtype=np.float32)
        depth[30, 40] = 0.5
        n = estimate_normals(depth, k)
        assert np.all(n == 0)

    def test_orientation_toward_camera(self, k):
        rng = np.random.default_rng(4)
        base = rng.uniform(0.4, 0.6)
        depth = np.full((60, 80), base, dtype=np.float32)
        depth += rng.normal(0, 0.002, size=depth.shape).astype(np.float32)
        n = estimate_normals(depth, k)
        pts, _ = unproject(depth, k)
        mask = np.linalg.norm(n, axis=-1) > 0.5
        dots = np.sum(n[mask] * pts[mask], axis=-1)
        assert np.all(dots < 0)
        assert np.allclose(np.linalg.norm(n[mask], axis=-1), 1.0, atol=1e-4)


def test_median_valid_depth():
    d = np.zeros((4, 4), dtype=np.float32)
    assert median_valid_depth(d, fallback=0.33) == 0.33
    d[0, 0] = 1.0
    d[0, 1] = 3.0
    assert median_valid_depth(d) == 2.0
