import numpy as np
import pytest

from avgrasp.config import VolumeConfig
from avgrasp.geometry import CameraIntrinsics, RigidTransform
from avgrasp.tsdf import TsdfVolume

from conftest import look_at, orbit_poses, render_sphere_depth

K = CameraIntrinsics.from_fov(80, 60, 60.0)

SMALL = VolumeConfig(origin=(-0.2, -0.2, -0.2), extent=(0.4, 0.4, 0.4), voxel_size=0.005)


def gray(depth):
    img = np.zeros(depth.shape + (3,), dtype=np.uint8)
    img[depth > 0] = 128
    return img


@pytest.fixture
def sphere_frame():
    pose = look_at((0.0, 0.0, 0.35), (0, 0, 0))
    depth = render_sphere_depth(K, pose, (0, 0, 0), 0.06)
    return pose, depth


class TestIntegrate:
    def test_surface_voxel_goes_to_zero(self, sphere_frame):
        pose, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        vol.integrate(gray(depth), depth, K, pose)
        # voxel at the closest surface point (0, 0, 0.06 below camera at z=0.35
        # looking down -> surface at z = 0.06 toward camera)
        idx = tuple(int((c - o) / vol.voxel_size) for c, o in zip((0, 0, 0.06), vol.origin))
        assert vol.weight[idx] > 0
        assert abs(vol.tsdf[idx]) < vol.voxel_size / vol.truncation

    def test_unobserved_voxel_unchanged(self, sphere_frame):
        pose, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        vol.integrate(gray(depth), depth, K, pose)
        # a voxel behind the sphere, well past the truncation band
        idx = tuple(int((c - o) / vol.voxel_size) for c, o in zip((0, 0, -0.15), vol.origin))
        assert vol.weight[idx] == 0
        assert vol.tsdf[idx] == 1.0

    def test_single_ema_application(self):
        vol = TsdfVolume(SMALL)
        # hand-place an observed voxel with value 1.0, then feed obs = 0.0
        vol.tsdf[10, 10, 10] = 1.0
        vol.weight[10, 10, 10] = 1
        center = vol.origin + (np.array([10, 10, 10]) + 0.5) * vol.voxel_size
        pose = look_at(center - np.array([0, 0, 0.3]), center)
        depth = np.full((K.height, K.width), 0.3, dtype=np.float32)
        vol.integrate(gray(depth), depth, K, pose)
        assert vol.tsdf[10, 10, 10] == pytest.approx(0.2, abs=1e-5)

    def test_values_stay_clamped(self, sphere_frame):
        pose, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        for _ in range(5):
            vol.integrate(gray(depth), depth, K, pose)
        assert vol.tsdf.min() >= -1.0
        assert vol.tsdf.max() <= 1.0
        assert vol.weight.max() <= vol.max_weight

    def test_repeat_integration_converges_monotonically(self, sphere_frame):
        pose, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        vol.integrate(gray(depth), depth, K, pose)
        observed = vol.weight > 0
        prev = np.abs(vol.tsdf.copy())
        # after the first pass values move toward the per-voxel observation;
        # re-integrating the same frame must not move them away
        vol.integrate(gray(depth), depth, K, pose)
        second = np.abs(vol.tsdf - prev * np.sign(vol.tsdf))
        assert np.all(np.abs(vol.tsdf[observed]) <= np.abs(prev[observed]) + 1e-6) or np.all(
            second[observed] <= prev[observed] + 1e-6
        )

    def test_nonfinite_pose_rejected(self, sphere_frame):
        _, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        bad = RigidTransform.__new__(RigidTransform)
        object.__setattr__(bad, "rotation", np.eye(3))
        object.__setattr__(bad, "translation", np.array([np.nan, 0, 0]))
        with pytest.raises(ValueError):
            vol.integrate(gray(depth), depth, K, bad)


class TestRaycast:
    def test_empty_volume_all_invalid(self):
        vol = TsdfVolume(SMALL)
        view = vol.raycast(K, look_at((0, 0, 0.3), (0, 0, 0)))
        assert np.all(view.depth == 0)
        assert np.all(view.normals == 0)

    def test_fuse_raycast_round_trip(self, sphere_frame):
        pose, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        vol.integrate(gray(depth), depth, K, pose)
        view = vol.raycast(K, pose)
        both = (depth > 0) & (view.depth > 0)
        assert both.sum() > 0.5 * (depth > 0).sum()
        rmse = np.sqrt(np.mean((view.depth[both] - depth[both]) ** 2))
        assert rmse < 2 * vol.voxel_size

    def test_novel_view_of_fused_sphere_matches_analytic(self):
        vol = TsdfVolume(SMALL)
        for pose in orbit_poses((0, 0, 0), 0.3, 8):
            depth = render_sphere_depth(K, pose, (0, 0, 0), 0.04)
            vol.integrate(gray(depth), depth, K, pose)
        novel = look_at((0.05, 0.1, 0.31), (0, 0, 0))
        view = vol.raycast(K, novel)
        ref = render_sphere_depth(K, novel, (0, 0, 0), 0.04)
        both = (ref > 0) & (view.depth > 0)
        assert both.sum() > 100
        rmse = np.sqrt(np.mean((view.depth[both] - ref[both]) ** 2))
        assert rmse < 2 * vol.voxel_size

    def test_surface_rms_below_voxel(self):
        # property: >= 8 views of an analytic sphere fuse to sub-voxel accuracy
        vol = TsdfVolume(SMALL)
        for pose in orbit_poses((0, 0, 0), 0.3, 10):
            depth = render_sphere_depth(K, pose, (0, 0, 0), 0.04)
            vol.integrate(gray(depth), depth, K, pose)
        pts = []
        for pose in orbit_poses((0, 0, 0), 0.28, 4, elevation_deg=20.0):
            view = vol.raycast(K, pose)
            ys, xs = np.nonzero(view.depth)
            z = view.depth[ys, xs]
            cam = np.stack([(xs - K.cx) * z / K.fx, (ys - K.cy) * z / K.fy, z], axis=-1)
            pts.append(pose.apply(cam))
        cloud = np.concatenate(pts)
        err = np.abs(np.linalg.norm(cloud, axis=1) - 0.04)
        rms = np.sqrt(np.mean(err**2))
        assert rms < vol.voxel_size

    def test_normals_unit_and_toward_camera(self, sphere_frame):
        pose, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        vol.integrate(gray(depth), depth, K, pose)
        view = vol.raycast(K, pose)
        mask = view.depth > 0
        n = view.normals[mask]
        assert np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-4)
        # camera-frame normals of a convex surface face the camera
        assert np.mean(n[:, 2] < 0) > 0.95


class TestSnapshot:
    def test_isolation(self, sphere_frame):
        pose, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        vol.integrate(gray(depth), depth, K, pose)
        snap = vol.snapshot()
        before = snap.tsdf.copy()
        vol.integrate(gray(depth * 0.9), depth * 0.9, K, pose)
        assert np.array_equal(snap.tsdf, before)
        with pytest.raises(ValueError):
            snap.tsdf[0, 0, 0] = 0.0

    def test_two_snapshots_identical(self, sphere_frame):
        pose, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        vol.integrate(gray(depth), depth, K, pose)
        a, b = vol.snapshot(), vol.snapshot()
        assert np.array_equal(a.tsdf, b.tsdf)
        assert np.array_equal(a.weight, b.weight)
        assert np.array_equal(a.color, b.color)

    def test_snapshot_raycast_matches_volume(self, sphere_frame):
        pose, depth = sphere_frame
        vol = TsdfVolume(SMALL)
        vol.integrate(gray(depth), depth, K, pose)
        snap = vol.snapshot()
        va = vol.raycast(K, pose)
        vb = snap.raycast(K, pose)
        assert np.array_equal(va.depth, vb.depth)
        assert np.array_equal(va.color, vb.color)


def test_save_load_round_trip(tmp_path, sphere_frame):
    pose, depth = sphere_frame
    vol = TsdfVolume(SMALL)
    vol.integrate(gray(depth), depth, K, pose)
    p = tmp_path / "vol.tsdf"
    vol.save(p)
    back = TsdfVolume.load(p)
    assert back.dims == vol.dims
    # header stores voxel size as a 32-bit float
    assert back.voxel_size == pytest.approx(vol.voxel_size, rel=1e-6)
    assert np.array_equal(back.tsdf, vol.tsdf)
    assert np.array_equal(back.weight, vol.weight)
    assert np.array_equal(back.color, vol.color)


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.tsdf"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError):
        TsdfVolume.load(p)
