"""Closed-loop 6DoF grasping from demonstrations, at desk scale.

Library layout:
  geometry   rigid transforms, pinhole projection, normals
  tsdf       TSDF fusion and raycast view rendering
  tracking   RGB-D frame-to-frame pose estimation (RANSAC + ICP)
  sim        synthetic grasping world and scripted demonstrator
  pipeline   demonstration processing into labeled training samples
  policy     action candidates, closed-loop episodes, replay buffer
  nn         from-scratch dense Q-value network with hand-written backprop
  archive    episode recording format (manifest + PPM + raw depth)
  experiments / report / cli / teleop   orchestration and interfaces
"""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, RigidTransform, compose, invert

__all__ = ["CameraIntrinsics", "RigidTransform", "compose", "invert", "__version__"]
