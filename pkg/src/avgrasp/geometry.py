"""Rigid transforms, pinhole cameras, and depth-image geometry.

Conventions used throughout the package:

* World frame: right-handed, z up, table surface at z = 0.
* Camera frame: OpenCV style, +z optical axis, +x right, +y down.
  Projection of (x, y, z): u = fx*x/z + cx, v = fy*y/z + cy.
* Tool (gripper) frame: origin at the fingertip midpoint, +z is the
  approach direction, +x the finger closing axis, +y = z cross x.
* Poses are entity-to-world maps: p_world = R @ p_local + t.
* Depth images: (H, W) float32 meters, 0 marks invalid pixels.
* Color images: (H, W, 3) uint8. Normal maps: (H, W, 3) float32 unit
  vectors in the camera frame, all-zero rows mark invalid pixels.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

_ORTHO_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class RigidTransform:
    """SE(3) element stored as a 3x3 rotation matrix and a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("non-finite transform")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return RigidTransform(m[:3, :3], m[:3, 3])

    @staticmethod
    def from_axis_angle(axis, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0:
            return RigidTransform(np.eye(3), translation)
        k = axis / n
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        r = np.eye(3) + math.sin(angle_rad) * kx + (1 - math.cos(angle_rad)) * (kx @ kx)
        return RigidTransform(r, translation)

    @staticmethod
    def from_quaternion(w: float, x: float, y: float, z: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        q = np.array([w, x, y, z], dtype=np.float64)
        q = q / np.linalg.norm(q)
        w, x, y, z = q
        r = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return RigidTransform(r, translation)

    @staticmethod
    def translate(x: float, y: float, z: float) -> "RigidTransform":
        return RigidTransform(np.eye(3), (x, y, z))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = _ORTHO_TOL) -> bool:
        r = self.rotation
        return (
            np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector) of points."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        if v.ndim == 1:
            return self.rotation @ v
        return v @ self.rotation.T


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a∘b: the result applies b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def rotation_angle_deg(r: np.ndarray) -> float:
    """Magnitude of a rotation matrix in degrees."""
    c = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def pose_delta(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(translation 2-norm in m, rotation angle in deg) between two poses."""
    d = compose(invert(a), b)
    return float(np.linalg.norm(d.translation)), rotation_angle_deg(d.rotation)


@dataclasses.dataclass(frozen=True)
class CameraIntrinsics:
    """Ideal pinhole model; fx/fy/cx/cy in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @staticmethod
    def from_fov(width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        fx = width / (2.0 * math.tan(math.radians(hfov_deg) / 2.0))
        return CameraIntrinsics(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same field of view at a different resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


def unproject(depth: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Back-project a depth image into the camera frame.

    Returns (points, valid): points is (H, W, 3) float32 with rows following
    pixel layout, valid is the (H, W) bool mask of pixels with depth > 0.
    Invalid pixels get zero points.
    """
    h, w = depth.shape
    if w != k.width or h != k.height:
        raise ValueError(f"depth {depth.shape} does not match intrinsics {k.height}x{k.width}")
    us = np.arange(w, dtype=np.float32)
    vs = np.arange(h, dtype=np.float32)
    uu, vv = np.meshgrid(us, vs)
    z = depth.astype(np.float32)
    x = (uu - k.cx) * z / k.fx
    y = (vv - k.cy) * z / k.fy
    pts = np.stack([x, y, z], axis=-1)
    valid = depth > 0
    pts[~valid] = 0.0
    return pts, valid


def unproject_points(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Valid pixels only, as an (N, 3) cloud in the camera frame."""
    pts, valid = unproject(depth, k)
    return pts[valid]


def project(points: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project camera-frame points; returns (u, v, z) arrays."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * p[:, 0] / z + k.cx
        v = k.fy * p[:, 1] / z + k.cy
    return u, v, z


def estimate_normals(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Per-pixel unit normals from central differences of the unprojected map.

    Normals are oriented toward the camera (n·p < 0). Pixels without four
    valid direct neighbors (including all boundary pixels) come back zero.
    """
    pts, valid = unproject(depth, k)
    h, w = depth.shape
    normals = np.zeros((h, w, 3), dtype=np.float32)
    if h < 3 or w < 3:
        return normals

    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dx, dy)
    ok = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)

    # orient toward the camera: flip so n·p < 0
    dot = np.sum(n * pts[1:-1, 1:-1], axis=-1)
    flip = dot > 0
    n[flip] = -n[flip]
    normals[1:-1, 1:-1] = n.astype(np.float32)
    return normals


def median_valid_depth(depth: np.ndarray, fallback: float = 0.5) -> float:
    """Median over valid pixels; `fallback` when the image has none."""
    d = depth[depth > 0]
    if d.size == 0:
        return float(fallback)
    return float(np.median(d))
