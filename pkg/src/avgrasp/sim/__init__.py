from .demonstrator import ScriptedEpisode, run_scripted_episode
from .env import GraspEnv
from .gripper import (
    FAILURE_COLLISION,
    FAILURE_NONE_IN_CLOSURE,
    FAILURE_SLIPPED,
    FAILURE_TOO_WIDE,
    GraspOutcome,
    GripperState,
    apply_action,
    attempt_close_and_lift,
    gripper_body,
    gripper_fingers,
)
from .render import render_packed, render_scene, pack_primitives
from .world import (
    SHAPE_BOX,
    SHAPE_CYLINDER,
    SHAPE_SPHERE,
    SUPPORT_CONFIGS,
    Primitive,
    Scene,
    generate_scene,
    perturb_scene,
)

__all__ = [
    "GraspEnv", "GraspOutcome", "GripperState", "Primitive", "Scene", "ScriptedEpisode",
    "SUPPORT_CONFIGS", "SHAPE_BOX", "SHAPE_CYLINDER", "SHAPE_SPHERE",
    "apply_action", "attempt_close_and_lift", "generate_scene", "gripper_body", "gripper_fingers",
    "pack_primitives", "perturb_scene", "render_packed", "render_scene",
    "run_scripted_episode",
    "FAILURE_COLLISION", "FAILURE_NONE_IN_CLOSURE", "FAILURE_SLIPPED", "FAILURE_TOO_WIDE",
]
