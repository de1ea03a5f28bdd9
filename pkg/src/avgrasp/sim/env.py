"""Grasping environment: one scene + gripper pair behind a camera API."""

from __future__ import annotations

import math

import numpy as np

from ..config import Profile
from ..geometry import RigidTransform, compose, invert
from . import render as render_mod
from .gripper import GraspOutcome, GripperState, apply_action, attempt_close_and_lift, gripper_fingers
from .world import Scene, generate_scene, perturb_scene


def _look_at_camera(eye, target, roll: float = 0.0) -> RigidTransform:
    """Camera-to-world pose with +z toward target, image-down roughly world-down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=1)
    if roll != 0.0:
        r = r @ RigidTransform.from_axis_angle([0, 0, 1], roll).rotation
    return RigidTransform(r, eye)


class GraspEnv:
    """A mutable scene + gripper pair; single-threaded by design."""

    def __init__(self, scene: Scene, profile: Profile, rng=None, depth_noise: bool = True):
        self.scene = scene
        self.profile = profile
        self.rng = rng if rng is not None else np.random.default_rng()
        self.noise_sigma = profile.camera.depth_noise_sigma if depth_noise else 0.0
        self.intrinsics = profile.intrinsics()
        self.gripper = GripperState(RigidTransform.identity(), profile.gripper.max_opening, False)
        self.carried = []  # objects rendered rigidly attached to the gripper
        self.reset_start_pose()

    @staticmethod
    def make(config: str, seed: int, profile: Profile, n_objects=None, depth_noise: bool = True) -> "GraspEnv":
        scene = generate_scene(
            config, seed, n_objects=n_objects,
            workspace_lo=profile.workspace.lo, workspace_hi=profile.workspace.hi,
        )
        return GraspEnv(scene, profile, np.random.default_rng(seed ^ 0x5F5F5F), depth_noise=depth_noise)

    def reset_start_pose(self):
        """Start each attempt overlooking the pile from the standoff distance."""
        c = self.scene.centroid()
        d = self.profile.start_distance
        ws = self.profile.workspace
        for _ in range(50):
            if self.scene.config == "wall":
                n = self.scene.support.normal
                jitter = np.array([0.0, self.rng.uniform(-0.5, 0.5), self.rng.uniform(0.05, 0.35)])
                direction = n + jitter
            else:
                az = self.rng.uniform(0, 2 * math.pi)
                el = self.rng.uniform(math.radians(35), math.radians(60))
                direction = np.array([math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)])
            direction = direction / np.linalg.norm(direction)
            eye = c + d * direction
            roll = self.rng.uniform(-math.radians(25), math.radians(25))
            cam_pose = _look_at_camera(eye, c, roll)
            tool_pose = compose(cam_pose, invert(self.profile.gripper.camera_offset()))
            if ws.contains(tool_pose.translation):
                break
        self.gripper = GripperState(tool_pose, self.profile.gripper.max_opening, False)

    def camera_pose(self) -> RigidTransform:
        return self.gripper.camera_pose(self.profile.gripper)

    def render(self):
        """(color, depth, gripper_mask) from the wrist camera."""
        prims = self.scene.all_primitives() + self.carried + gripper_fingers(self.gripper, self.profile.gripper)
        packed = render_mod.pack_primitives(prims)
        color, depth, index = render_mod.render_packed(packed, self.intrinsics, self.camera_pose())
        n_fixed = len(self.scene.all_primitives()) + len(self.carried)
        mask = index >= n_fixed
        if self.noise_sigma > 0:
            noise = self.rng.normal(0.0, self.noise_sigma, size=depth.shape).astype(np.float32)
            depth = np.where(depth > 0, np.maximum(depth + noise, 1e-4), 0.0)
        return color, depth, mask

    def apply(self, action: RigidTransform) -> bool:
        """Execute a relative tool-frame motion; True if it stopped on contact."""
        if self.gripper.closed:
            raise ValueError("gripper is closed; reset before moving")
        self.gripper, collided = apply_action(
            self.scene, self.gripper, action, self.profile.workspace, self.profile.gripper
        )
        return collided

    def close_and_lift(self) -> GraspOutcome:
        outcome, self.gripper = attempt_close_and_lift(
            self.scene, self.gripper, self.profile.gripper, lift=self.profile.policy.lift_height
        )
        return outcome

    def perturb(self, rng=None) -> None:
        perturb_scene(self.scene, rng if rng is not None else self.rng)

    def carry(self, prim) -> None:
        self.carried.append(prim)

    def clear_carried(self) -> None:
        self.carried = []
