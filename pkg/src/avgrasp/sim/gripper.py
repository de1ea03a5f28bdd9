"""Gripper kinematics, swept-motion collision, and the grasp-success oracle.

The tool frame sits at the fingertip midpoint: +z approach, +x closing
axis. Fingers are boxes spanning z in [-finger_length, 0]; the wrist
camera rides behind and slightly above them. Grasping is judged purely
geometrically: fingers sweep inward along x, the first surfaces they
touch decide the outcome, and a successful grasp must lift free.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from ..config import GripperConfig, WorkspaceConfig
from ..geometry import RigidTransform, compose
from .world import SHAPE_BOX, SHAPE_SPHERE, Primitive, Scene

FAILURE_NONE_IN_CLOSURE = "none-in-closure"
FAILURE_TOO_WIDE = "too-wide"
FAILURE_COLLISION = "collision"
FAILURE_SLIPPED = "slipped-on-lift"


@dataclasses.dataclass
class GripperState:
    pose: RigidTransform              # tool-to-world, origin at fingertip midpoint
    opening: float = 0.10
    closed: bool = False

    def camera_pose(self, cfg: GripperConfig) -> RigidTransform:
        return compose(self.pose, cfg.camera_offset())


@dataclasses.dataclass
class GraspOutcome:
    success: bool
    object_uid: int | None = None
    failure_reason: str | None = None
    width: float = 0.0


def gripper_fingers(state: GripperState, cfg: GripperConfig) -> list:
    """The two finger boxes only; this is what the wrist camera sees."""
    return gripper_body(state, cfg)[:2]


def gripper_body(state: GripperState, cfg: GripperConfig) -> list:
    """Finger and palm boxes in world coordinates (uid -100.. for masking).

    The palm plate connects the fingers behind the camera's sight line; it
    takes part in collision checks but is not rendered (the camera looks
    over it, as on the physical rig).
    """
    fl, ft, fw = cfg.finger_length, cfg.finger_thickness, cfg.finger_width
    half_open = state.opening / 2.0
    color = (45, 45, 50)
    locals_ = [
        ((half_open + fw / 2, 0.0, -fl / 2), (fw / 2, ft / 2, fl / 2)),
        ((-half_open - fw / 2, 0.0, -fl / 2), (fw / 2, ft / 2, fl / 2)),
        ((0.0, 0.0, -fl - cfg.palm_depth / 2), (half_open + fw, cfg.palm_half_thickness, cfg.palm_depth / 2)),
    ]
    out = []
    for i, (center, half) in enumerate(locals_):
        pose = compose(state.pose, RigidTransform.translate(*center))
        out.append(Primitive(SHAPE_BOX, half, pose, color, uid=-100 - i))
    return out


_local_pts_cache: dict = {}


def _gripper_local_points(opening: float, cfg: GripperConfig) -> np.ndarray:
    key = (round(opening, 4), id(cfg))
    cached = _local_pts_cache.get(key)
    if cached is None:
        base = GripperState(RigidTransform.identity(), opening, False)
        cached = np.concatenate([b.surface_points(spacing=0.008) for b in gripper_body(base, cfg)])
        if len(_local_pts_cache) > 256:
            _local_pts_cache.clear()
        _local_pts_cache[key] = cached
    return cached


def _gripper_sample_points(state: GripperState, cfg: GripperConfig) -> np.ndarray:
    return state.pose.apply(_gripper_local_points(state.opening, cfg))


def _min_scene_sdf(points: np.ndarray, prims) -> float:
    best = np.inf
    for p in prims:
        best = min(best, float(p.sdf(points).min()))
        if best < 0:
            break
    return best


def _interpolate_pose(a: RigidTransform, b: RigidTransform, frac: float) -> RigidTransform:
    """Linear translation + slerp-style rotation between two poses."""
    t = (1 - frac) * a.translation + frac * b.translation
    d = a.rotation.T @ b.rotation
    angle = math.acos(min(1.0, max(-1.0, (np.trace(d) - 1.0) / 2.0)))
    if angle < 1e-9:
        return RigidTransform(a.rotation if frac < 1 else b.rotation, t)
    axis = np.array([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]]) / (2 * math.sin(angle))
    step = RigidTransform.from_axis_angle(axis, angle * frac).rotation
    return RigidTransform(a.rotation @ step, t)


def pose_collides(scene: Scene, state: GripperState, cfg: GripperConfig,
                  clearance: float = 0.0, skip_uid: int | None = None) -> bool:
    """True when the gripper body at `state` touches the scene or support."""
    pts = _gripper_sample_points(state, cfg)
    prims = [p for p in scene.all_primitives() if p.uid != skip_uid]
    return _min_scene_sdf(pts, prims) < clearance


def apply_action(scene: Scene, state: GripperState, action: RigidTransform,
                 workspace: WorkspaceConfig, cfg: GripperConfig,
                 clearance: float = 0.0) -> tuple[GripperState, bool]:
    """Move the tool by a relative transform expressed in the tool frame.

    The motion is swept-checked against objects and support geometry; on
    contact it stops at the last collision-free sample and the flag is
    set. The final position is clamped to the workspace box.
    """
    if not (np.all(np.isfinite(action.rotation)) and np.all(np.isfinite(action.translation))):
        raise ValueError("non-finite action")
    target = compose(state.pose, action)
    clamped = workspace.clamp(target.translation)
    target = RigidTransform(target.rotation, clamped)

    dist = float(np.linalg.norm(target.translation - state.pose.translation))
    ang = math.acos(min(1.0, max(-1.0, (np.trace(state.pose.rotation.T @ target.rotation) - 1) / 2)))
    n_steps = max(1, int(math.ceil(dist / 0.005)), int(math.ceil(ang / math.radians(5))))
    prims = scene.all_primitives()
    good = state.pose
    collided = False
    for i in range(1, n_steps + 1):
        pose = _interpolate_pose(state.pose, target, i / n_steps)
        pts = _gripper_sample_points(GripperState(pose, state.opening, state.closed), cfg)
        if _min_scene_sdf(pts, prims) < clearance:
            collided = True
            break
        good = pose
    return GripperState(good, state.opening, state.closed), collided


def _x_interval_in_region(obj: Primitive, tool: RigidTransform, half_open: float,
                          ft: float, fl: float):
    """Closing-axis extent of an object inside the between-fingers slab.

    Returns (min_x, max_x, overlaps_region) in tool coordinates, or None
    when the object does not enter the y/z slab at all. Spheres are
    analytic; boxes and cylinders use dense surface samples.
    """
    if obj.shape == SHAPE_SPHERE:
        r = obj.size[0]
        c = tool.rotation.T @ (obj.pose.translation - tool.translation)
        dy = max(0.0, abs(c[1]) - ft / 2)
        dz = max(0.0, c[2], -fl - c[2])
        d2 = dy * dy + dz * dz
        if d2 >= r * r:
            return None
        half_chord = math.sqrt(r * r - d2)
        lo, hi = c[0] - half_chord, c[0] + half_chord
        return lo, hi, (lo < half_open and hi > -half_open)
    pts = obj.surface_points(spacing=0.0025)
    local = (pts - tool.translation) @ tool.rotation
    inside = (np.abs(local[:, 1]) <= ft / 2) & (local[:, 2] <= 0.0) & (local[:, 2] >= -fl)
    if not np.any(inside):
        return None
    xs = local[inside, 0]
    lo, hi = float(xs.min()), float(xs.max())
    return lo, hi, (lo < half_open and hi > -half_open)


def attempt_close_and_lift(scene: Scene, state: GripperState, cfg: GripperConfig,
                           lift: float = 0.10) -> tuple[GraspOutcome, GripperState]:
    """Close the fingers, then lift and check what (if anything) was grasped.

    Success requires exactly one object of graspable width between the
    fingers, both finger contacts on that object, and a collision-free
    lift along world z (the support normal for wall scenes). Grasped
    objects are removed from the scene.
    """
    if state.closed:
        raise ValueError("gripper already closed")
    half_open = state.opening / 2.0
    fl, ft = cfg.finger_length, cfg.finger_thickness

    intervals = {}
    for obj in scene.objects:
        # cheap reject: bounding sphere vs closure region
        c_local = state.pose.rotation.T @ (obj.pose.translation - state.pose.translation)
        if np.linalg.norm(c_local - np.array([0, 0, -fl / 2])) > obj.bounding_radius() + half_open + fl:
            continue
        res = _x_interval_in_region(obj, state.pose, half_open, ft, fl)
        if res is not None and res[2]:
            intervals[obj.uid] = (res[0], res[1])

    closed_state = dataclasses.replace(state, closed=True)
    if not intervals:
        return GraspOutcome(False, None, FAILURE_NONE_IN_CLOSURE), closed_state

    widths = {uid: hi - lo for uid, (lo, hi) in intervals.items()}
    # fingers start at +-half_open; anything already poking past them blocks closing
    widest_uid = max(widths, key=widths.get)
    straddlers = [
        uid for uid, (lo, hi) in intervals.items()
        if lo < -half_open - 1e-9 or hi > half_open + 1e-9
    ]
    if widths[widest_uid] > state.opening:
        return GraspOutcome(False, None, FAILURE_TOO_WIDE, widths[widest_uid]), closed_state
    if straddlers:
        return GraspOutcome(False, None, FAILURE_COLLISION, widths[widest_uid]), closed_state

    qualifiers = [uid for uid, w in widths.items() if cfg.min_grasp_width <= w <= state.opening]
    if not qualifiers:
        return GraspOutcome(False, None, FAILURE_SLIPPED), closed_state
    if len(qualifiers) > 1:
        return GraspOutcome(False, None, FAILURE_COLLISION), closed_state
    target_uid = qualifiers[0]

    # each finger sweeps inward and stops at the first surface it meets
    left_contact_uid = min(intervals, key=lambda u: intervals[u][0])
    right_contact_uid = max(intervals, key=lambda u: intervals[u][1])
    if left_contact_uid != target_uid or right_contact_uid != target_uid:
        return GraspOutcome(False, None, FAILURE_COLLISION), closed_state

    width = widths[target_uid]
    target = next(o for o in scene.objects if o.uid == target_uid)

    # lift check: object + gripper move up; nothing may block the path
    lift_dir = scene.support.normal if scene.config == "wall" else np.array([0.0, 0.0, 1.0])
    others = [o for o in scene.objects if o.uid != target_uid] + scene.static_primitives()
    obj_pts = target.surface_points(spacing=0.005)
    grip_state = GripperState(state.pose, width, True)
    grip_pts = _gripper_sample_points(grip_state, cfg)
    for frac in np.linspace(0.25, 1.0, 4):
        offset = lift_dir * (lift * frac)
        if _min_scene_sdf(obj_pts + offset, others) < -0.001:
            return GraspOutcome(False, None, FAILURE_SLIPPED, width), closed_state
        if _min_scene_sdf(grip_pts + offset, others) < -0.001:
            return GraspOutcome(False, None, FAILURE_SLIPPED, width), closed_state

    scene.remove(target_uid)
    lifted_pose = RigidTransform(state.pose.rotation, state.pose.translation + lift_dir * lift)
    return GraspOutcome(True, target_uid, None, width), GripperState(lifted_pose, width, True)
