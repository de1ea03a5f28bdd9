"""Observation tensor conventions shared by training, policy, and pipeline.

Network inputs are 7-channel float32 (C, H, W) tensors:
    channels 0-2  RGB scaled to [0, 1]
    channel  3    depth clipped to [0, max_depth] and scaled to [0, 1]
    channels 4-6  unit surface normals in the camera frame ([-1, 1])
Invalid pixels carry zeros in the depth and normal channels.
"""

from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, estimate_normals
from .tsdf import RenderedView


def obs_tensor(color: np.ndarray, depth: np.ndarray, k: CameraIntrinsics,
               max_depth: float = 1.5, normals: np.ndarray | None = None) -> np.ndarray:
    if normals is None:
        normals = estimate_normals(depth, k)
    h, w = depth.shape
    out = np.empty((7, h, w), dtype=np.float32)
    out[0:3] = color.transpose(2, 0, 1).astype(np.float32) / 255.0
    out[3] = np.clip(depth, 0.0, max_depth) / max_depth
    out[4:7] = normals.transpose(2, 0, 1)
    return out


def view_tensor(view: RenderedView, max_depth: float = 1.5) -> np.ndarray:
    return obs_tensor(view.color, view.depth, view.intrinsics, max_depth, normals=view.normals)


def pack_f16(t: np.ndarray) -> np.ndarray:
    return t.astype(np.float16)


def unpack_f16(t: np.ndarray) -> np.ndarray:
    return t.astype(np.float32)
