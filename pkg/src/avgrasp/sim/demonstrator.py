"""Scripted demonstration collector: a stand-in teleoperator.

Plans a pre-grasp approach that aligns the closing axis with the target's
narrowest graspable direction, walks toward it with action-scale step
sizes plus pose noise and occasional lateral detours, presses the close
trigger when the proximity heuristic fires, then records the post-grasp
lift. Emits exactly the frames/poses/button stream a human teleop session
would produce.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from ..config import Profile
from ..geometry import RigidTransform, compose, invert
from ..policy import action_scale, should_close
from .env import GraspEnv
from .gripper import GraspOutcome, GripperState, pose_collides
from .world import SHAPE_BOX, SHAPE_CYLINDER, SHAPE_SPHERE, Primitive, Scene


@dataclasses.dataclass
class ScriptedEpisode:
    frames: list          # (color, depth) tuples
    poses: list           # camera-to-world RigidTransforms
    button: list          # 0/1 per frame
    outcome: GraspOutcome | None
    target_uid: int | None
    scene_json: str


def _perp(v: np.ndarray) -> np.ndarray:
    a = np.array([0.0, 0.0, 1.0]) if abs(v[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    p = np.cross(v, a)
    return p / np.linalg.norm(p)


def _narrow_direction(obj: Primitive, up: np.ndarray, opening: float, rng) -> np.ndarray:
    """Closing direction in the support plane: the object's narrowest side."""

    def flatten(v):
        h = v - np.dot(v, up) * up
        n = np.linalg.norm(h)
        return None if n < 0.3 else h / n

    if obj.shape == SHAPE_BOX:
        best, best_ext = None, np.inf
        for i in range(3):
            ext = 2 * obj.size[i]
            if ext > opening - 0.006:
                continue
            h = flatten(obj.pose.rotation[:, i])
            if h is not None and ext < best_ext:
                best, best_ext = h, ext
        if best is not None:
            return best
    elif obj.shape == SHAPE_CYLINDER:
        axis = obj.pose.rotation[:, 2]
        if abs(np.dot(axis, up)) < 0.7:  # lying: close across the curved side
            c = np.cross(up, axis)
            n = np.linalg.norm(c)
            if n > 1e-6:
                return c / n
    # sphere, standing cylinder, or fallback: any direction in the plane
    base = _perp(up)
    ang = rng.uniform(0, 2 * math.pi)
    return RigidTransform.from_axis_angle(up, ang).rotation @ base


def _plan_grasp(scene: Scene, target: Primitive, gripper, rng) -> RigidTransform:
    """Tool pose whose closing axis spans the target's narrow side.

    The approach azimuth is slaved to the closing direction so the finger
    span stays level with the support plane; the fingertip overshoot past
    the object center is limited so no part of a finger dips into the
    support.
    """
    up = scene.support.normal
    center = target.pose.translation
    frame_origin = scene.support.frame.translation
    opening = gripper.max_opening

    if scene.config == "wall":
        closing = _narrow_direction(target, up, opening, rng)
        tilt = rng.normal(0.0, 0.1, size=3)
        a = -up + tilt - np.dot(tilt, up) * up * 0.0
        a = a / np.linalg.norm(a)
        x = closing - np.dot(closing, a) * a
        x = x / np.linalg.norm(x)
        y = np.cross(a, x)
        s = gripper.finger_length / 2
        return RigidTransform(np.stack([x, y, a], axis=1), center + s * a)

    closing = _narrow_direction(target, up, opening, rng)
    phi = rng.uniform(math.radians(6), math.radians(26))
    for _ in range(3):
        h_a = np.cross(up, closing)
        h_a /= np.linalg.norm(h_a)
        if rng.random() < 0.5:
            h_a = -h_a
        jitter = RigidTransform.from_axis_angle(up, rng.normal(0.0, math.radians(8))).rotation
        h_a = jitter @ h_a
        a = -math.cos(phi) * up + math.sin(phi) * h_a
        a /= np.linalg.norm(a)
        x = np.cross(a, up)
        x /= np.linalg.norm(x)
        if np.dot(x, closing) < 0:
            x = -x
        y = np.cross(a, x)
        rot = np.stack([x, y, a], axis=1)

        # lowest finger-box point relative to the tool origin, along `up`
        half_span = opening / 2 + gripper.finger_width
        dip = 0.0
        for cx in (-half_span, half_span):
            for cy in (-gripper.finger_thickness / 2, gripper.finger_thickness / 2):
                for cz in (-gripper.finger_length, 0.0):
                    corner = cx * x + cy * y + cz * a
                    dip = min(dip, float(np.dot(corner, up)))
        center_h = float(np.dot(center - frame_origin, up))
        min_origin_h = 0.003 - dip
        cos_phi = -float(np.dot(a, up))
        s_max = (center_h - min_origin_h) / max(cos_phi, 1e-6)
        s = min(gripper.finger_length / 2, s_max)
        if s >= 0.001:
            return RigidTransform(rot, center + s * a)
        phi *= 0.5  # approach steeper: tilted fingers would hit the support
    return RigidTransform(rot, center + 0.001 * a)


def _pick_target(scene: Scene, opening: float, rng) -> Primitive | None:
    graspable = [o for o in scene.objects if 0.008 <= o.min_graspable_extent() <= opening - 0.004]
    if not graspable:
        return None
    return graspable[int(rng.integers(0, len(graspable)))]


def run_scripted_episode(env: GraspEnv, rng) -> ScriptedEpisode:
    """Drive one grasp attempt; raises when the scene has nothing graspable."""
    profile = env.profile
    scene = env.scene
    k = env.intrinsics
    target = _pick_target(scene, profile.gripper.max_opening, rng)
    if target is None:
        raise ValueError("no graspable object in scene")

    # resample the plan until the open gripper fits at the grasp pose
    grasp = None
    for _ in range(6):
        cand = _plan_grasp(scene, target, profile.gripper, rng)
        probe = GripperState(cand, profile.gripper.max_opening, False)
        if not pose_collides(scene, probe, profile.gripper, clearance=0.001, skip_uid=target.uid):
            grasp = cand
            break
        grasp = cand
    approach = grasp.rotation[:, 2]
    pre = RigidTransform(grasp.rotation, grasp.translation - 0.10 * approach)

    waypoints = [pre, grasp]
    if rng.random() < 0.3:
        lateral = _perp(approach) * rng.uniform(0.04, 0.10) * (1 if rng.random() < 0.5 else -1)
        mid = RigidTransform(pre.rotation, 0.5 * (env.gripper.pose.translation + pre.translation) + lateral)
        waypoints.insert(0, mid)

    frames, poses, button = [], [], []
    scene_json = scene.to_json()
    outcome = None
    pressed = False
    median = 0.5
    stuck = 0
    backoffs = 0
    for step in range(60):
        color, depth, _ = env.render()
        frames.append((color, depth))
        poses.append(env.camera_pose())

        at_grasp = not waypoints and _pose_close(env.gripper.pose, grasp, 0.012, 10.0)
        if should_close(depth, k, profile) or at_grasp:
            button.append(1)
            pressed = True
            outcome = env.close_and_lift()
            break
        button.append(0)

        if np.any(depth > 0):
            median = float(np.median(depth[depth > 0]))
        d, a_deg = action_scale(median)
        wp = waypoints[0] if waypoints else grasp
        moved = _step_toward(env, wp, d + profile.policy.forward_offset, a_deg, rng)
        stuck = 0 if moved else stuck + 1
        if stuck >= 3:
            if backoffs >= 2:
                break  # wedged: give up without pressing
            env.apply(RigidTransform.translate(0, 0, -0.03))
            backoffs += 1
            stuck = 0
        if waypoints and _pose_close(env.gripper.pose, waypoints[0], 0.02, 12.0):
            waypoints.pop(0)

    if pressed and outcome is not None:
        _record_lift(env, frames, poses, button, outcome, target, profile)
    return ScriptedEpisode(frames, poses, button, outcome, target.uid if outcome else None, scene_json)


def _pose_close(a: RigidTransform, b: RigidTransform, tol_t: float, tol_deg: float) -> bool:
    dt = float(np.linalg.norm(a.translation - b.translation))
    c = (np.trace(a.rotation.T @ b.rotation) - 1) / 2
    ang = math.degrees(math.acos(min(1.0, max(-1.0, c))))
    return dt < tol_t and ang < tol_deg


def _step_toward(env: GraspEnv, wp: RigidTransform, max_step: float, max_deg: float, rng) -> bool:
    pose = env.gripper.pose
    delta = wp.translation - pose.translation
    dist = float(np.linalg.norm(delta))
    step = delta if dist <= max_step else delta * (max_step / dist)
    step = step + rng.normal(0.0, 0.005, size=3)  # teleop hand jitter

    d = pose.rotation.T @ wp.rotation
    c = (np.trace(d) - 1) / 2
    ang = math.acos(min(1.0, max(-1.0, c)))
    if ang > 1e-6:
        axis = np.array([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]])
        axis = axis / (2 * math.sin(ang))
        rot = RigidTransform.from_axis_angle(axis, min(ang, math.radians(max_deg)))
    else:
        rot = RigidTransform.identity()
    noise_axis = rng.normal(size=3)
    noise = RigidTransform.from_axis_angle(noise_axis, rng.normal(0.0, math.radians(3.0)))
    rel_rot = compose(noise, rot)
    rel_trans = pose.rotation.T @ step
    action = RigidTransform(rel_rot.rotation, rel_trans)
    before = pose.translation.copy()
    env.apply(action)
    return bool(np.linalg.norm(env.gripper.pose.translation - before) > 1e-4)


def _record_lift(env: GraspEnv, frames, poses, button, outcome: GraspOutcome,
                 target: Primitive, profile: Profile) -> None:
    """Post-grasp frames: the grasped object rides with the camera."""
    lift_dir = env.scene.support.normal if env.scene.config == "wall" else np.array([0.0, 0.0, 1.0])
    lifted = env.gripper.pose  # close_and_lift already moved the tool up on success
    if outcome.success:
        start = RigidTransform(lifted.rotation, lifted.translation - lift_dir * profile.policy.lift_height)
    else:
        start = lifted
    for frac in (0.3, 0.65, 1.0):
        pose = RigidTransform(lifted.rotation, start.translation + (lifted.translation - start.translation) * frac)
        env.gripper = dataclasses.replace(env.gripper, pose=pose)
        if outcome.success:
            carried_pose = RigidTransform(
                target.pose.rotation,
                target.pose.translation + (pose.translation - start.translation),
            )
            env.carried = [Primitive(target.shape, target.size, carried_pose, target.color, target.uid)]
        color, depth, _ = env.render()
        frames.append((color, depth))
        poses.append(env.camera_pose())
        button.append(1)
    # release: one trailing frame with the button up
    color, depth, _ = env.render()
    frames.append((color, depth))
    poses.append(env.camera_pose())
    button.append(0)
    env.clear_carried()
