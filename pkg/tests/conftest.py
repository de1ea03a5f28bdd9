import math

import numpy as np

from avgrasp.geometry import CameraIntrinsics, RigidTransform


def look_at(eye, target, up=(0, 0, 1)) -> RigidTransform:
    """Camera-to-world pose with +z pointing from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (1.0, 0.0, 0.0))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=1)
    return RigidTransform(r, eye)


def render_sphere_depth(k: CameraIntrinsics, cam_pose: RigidTransform,
                        center, radius: float) -> np.ndarray:
    """Analytic ray-sphere depth image (0 where the ray misses)."""
    us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height))
    dirs = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, dtype=np.float64)], axis=-1
    )
    dirs_w = dirs @ cam_pose.rotation.T
    o = cam_pose.translation - np.asarray(center, dtype=np.float64)
    a = np.sum(dirs_w * dirs_w, axis=-1)
    b = 2.0 * np.sum(dirs_w * o, axis=-1)
    c = np.dot(o, o) - radius * radius
    disc = b * b - 4 * a * c
    hit = disc >= 0
    t = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a), 0.0)
    depth = np.where(hit & (t > 0), t, 0.0)  # dirs have unit z in camera frame
    return depth.astype(np.float32)


def render_plane_depth(k: CameraIntrinsics, cam_pose: RigidTransform, plane_z: float) -> np.ndarray:
    """Depth image of the infinite world plane z = plane_z."""
    us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height))
    dirs = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, dtype=np.float64)], axis=-1
    )
    dirs_w = dirs @ cam_pose.rotation.T
    denom = dirs_w[..., 2]
    t = np.where(np.abs(denom) > 1e-9, (plane_z - cam_pose.translation[2]) / denom, -1.0)
    return np.where(t > 0, t, 0.0).astype(np.float32)


def orbit_poses(center, distance, n, elevation_deg=35.0):
    """n camera poses on a circle looking at `center`."""
    out = []
    el = math.radians(elevation_deg)
    for i in range(n):
        az = 2 * math.pi * i / n
        eye = np.asarray(center) + distance * np.array(
            [math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)]
        )
        out.append(look_at(eye, center))
    return out
