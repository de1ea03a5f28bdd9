"""Run configuration: camera/volume/gripper/policy/network settings.

Two bundled profiles are provided. "default" mirrors the deployment-scale
geometry (360x640 wrist images, 45x80 action views, 5 mm voxels). "fast"
is the reduced profile the training experiments run at on CPU (96x128
wrist images, 24x32 views, 6 mm voxels, narrower network). Resolution is
configuration throughout; every consumer reads it from here.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .geometry import CameraIntrinsics, RigidTransform


@dataclasses.dataclass(frozen=True)
class CameraConfig:
    width: int = 640
    height: int = 360
    hfov_deg: float = 60.0
    depth_noise_sigma: float = 0.001  # meters; 0 disables
    max_depth: float = 1.5

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.hfov_deg)

    def view_intrinsics(self, view_height: int, view_width: int) -> CameraIntrinsics:
        return self.intrinsics().scaled(view_width, view_height)


@dataclasses.dataclass(frozen=True)
class VolumeConfig:
    origin: tuple[float, float, float] = (-0.4, -0.4, -0.05)
    extent: tuple[float, float, float] = (0.8, 0.8, 0.6)
    voxel_size: float = 0.005
    trunc_voxels: float = 5.0
    max_weight: int = 64

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(round(e / self.voxel_size)) for e in self.extent)

    @property
    def truncation(self) -> float:
        return self.trunc_voxels * self.voxel_size


@dataclasses.dataclass(frozen=True)
class GripperConfig:
    max_opening: float = 0.10
    finger_length: float = 0.04   # along tool z, tips at z=0
    finger_thickness: float = 0.02  # along tool y
    finger_width: float = 0.012    # along tool x, per finger
    palm_depth: float = 0.03       # palm box along tool z, behind the fingers
    palm_half_thickness: float = 0.005  # along tool y; thin so the camera sees past it
    camera_back: float = 0.25      # camera distance behind fingertips along tool z
    camera_up: float = 0.05        # camera offset above the tool axis (-y in tool frame)
    min_grasp_width: float = 0.005

    def camera_offset(self) -> RigidTransform:
        """Camera pose in the tool frame (axes aligned, behind and above)."""
        return RigidTransform(np.eye(3), (0.0, -self.camera_up, -self.camera_back))

    @property
    def fingertip_depth(self) -> float:
        """z-depth of the fingertip plane in the wrist camera frame."""
        return self.camera_back


@dataclasses.dataclass(frozen=True)
class PolicyConfig:
    discount: float = 0.999
    epsilon0: float = 0.1
    epsilon_floor: float = 0.01
    epsilon_anneal_episodes: int = 1000
    max_steps: int = 40
    close_margin: float = 0.015    # close when depth < fingertip_depth - margin
    close_percentile: float = 1.0  # nearest N percent of window depth
    lift_height: float = 0.10
    forward_offset: float = 0.01   # +z bias added to every action candidate
    # close-heuristic window between the fingers, as fractions of image size
    window_frac_w: float = 0.0625  # 40 px at width 640
    window_frac_h: float = 0.0555  # 20 px at height 360

    def epsilon_at(self, episode: int) -> float:
        if self.epsilon_anneal_episodes <= 0:
            return self.epsilon0
        frac = min(1.0, episode / self.epsilon_anneal_episodes)
        return self.epsilon0 + frac * (self.epsilon_floor - self.epsilon0)


@dataclasses.dataclass(frozen=True)
class NetConfig:
    in_channels: int = 7
    width1: int = 16     # stem width (appendix-scale 64)
    width2: int = 32     # block width (appendix-scale 128)
    state_pools: int = 2  # pooling stages in the state encoder; /8 with the stride-2 stem
    seed: int = 0

    @property
    def state_reduction(self) -> int:
        return 2 ** (1 + self.state_pools)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        return NetConfig(**d)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    target_sync_every: int = 500   # updates between target-network syncs; 0 disables
    replay_capacity: int = 50_000
    updates_per_episode: int = 2


@dataclasses.dataclass(frozen=True)
class WorkspaceConfig:
    lo: tuple[float, float, float] = (-0.4, -0.4, 0.005)
    hi: tuple[float, float, float] = (0.4, 0.4, 0.6)

    def clamp(self, p: np.ndarray) -> np.ndarray:
        return np.clip(p, self.lo, self.hi)

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


@dataclasses.dataclass(frozen=True)
class Profile:
    """Everything a run needs, bundled under a name."""

    name: str = "default"
    camera: CameraConfig = CameraConfig()
    view_height: int = 45
    view_width: int = 80
    volume: VolumeConfig = VolumeConfig()
    gripper: GripperConfig = GripperConfig()
    policy: PolicyConfig = PolicyConfig()
    net: NetConfig = NetConfig()
    train: TrainConfig = TrainConfig()
    workspace: WorkspaceConfig = WorkspaceConfig()
    start_distance: float = 0.5    # episode start: tool this far from the pile centroid

    def intrinsics(self) -> CameraIntrinsics:
        return self.camera.intrinsics()

    def view_intrinsics(self) -> CameraIntrinsics:
        return self.camera.view_intrinsics(self.view_height, self.view_width)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def default_profile() -> Profile:
    return Profile()


def fast_profile() -> Profile:
    """Reduced-scale profile used by the CPU training experiments."""
    return Profile(
        name="fast",
        camera=CameraConfig(width=128, height=96),
        view_height=24,
        view_width=32,
        volume=VolumeConfig(origin=(-0.36, -0.36, -0.036), extent=(0.72, 0.72, 0.48), voxel_size=0.006),
        net=NetConfig(width1=8, width2=16, state_pools=1),
        workspace=WorkspaceConfig(lo=(-0.36, -0.36, 0.005), hi=(0.36, 0.36, 0.44)),
    )


def tiny_net_config() -> NetConfig:
    """Small network used for finite-difference gradient checks."""
    return NetConfig(width1=4, width2=8, state_pools=0)


_PROFILES = {"default": default_profile, "fast": fast_profile}


def get_profile(name: str) -> Profile:
    try:
        return _PROFILES[name]()
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(_PROFILES)}") from None
