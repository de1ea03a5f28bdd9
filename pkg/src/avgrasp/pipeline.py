"""Demonstration processing: recordings in, labeled training samples out.

A recording's button signal segments it into pick attempts. For every
pre-grasp step the frames so far are fused into a TSDF, candidate action
views are rendered around the demonstrated pose, and the view closest to
the *next* demonstrated view (by 3D frustum IoU) becomes the positive
sample with a discounted return target; distant views are subsampled into
negatives at a strict 1:5 ratio. The grasped object's pixels are
recovered by background subtraction over the post-grasp span.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
from scipy import ndimage

from .archive import EpisodeArchive, load_archive
from .config import Profile
from .features import pack_f16, view_tensor
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    compose,
    invert,
    median_valid_depth,
)
from .policy import generate_actions, render_candidate_views
from .sim.gripper import GripperState, gripper_fingers
from .sim.render import pack_primitives, render_packed
from .tsdf import TsdfVolume

log = logging.getLogger(__name__)

DISCOUNT = 0.999
POSITIVE_RANK = 0          # best-ranked view is the positive
DISCARD_RANKS = 3          # ranks 2..4 train neither way
NEGATIVES_PER_POSITIVE = 5
MIN_POSITIVE_IOU = 0.05    # below this the tracked pose is untrustworthy


@dataclasses.dataclass
class PickAttempt:
    pre_grasp: list          # frame indices before the press
    grasp_pose: RigidTransform  # tool pose at the press frame
    post_grasp: list         # frame indices from press to release (exclusive)
    pick_order: int
    object_mask: np.ndarray | None = None
    truncated: bool = False  # press without release


@dataclasses.dataclass
class LabeledSample:
    archive: str             # episode directory
    frame: int               # state observation frame index
    view: np.ndarray         # (7, h, w) float16 rendered candidate view
    label: int               # 1 positive, 0 negative
    q_target: float
    grasp_pixel: tuple       # (row, col) or (-1, -1) when outside the view


def segment_attempts(rec: EpisodeArchive, tool_poses=None) -> list:
    """Split a recording into per-press pick attempts.

    Pre-grasp spans run from the later of (recording start, previous
    release) up to the press; post-grasp spans run press -> release.
    """
    button = np.asarray(rec.button, dtype=int)
    n = len(button)
    edges_up = [i for i in range(n) if button[i] == 1 and (i == 0 or button[i - 1] == 0)]
    attempts = []
    prev_release = 0
    if tool_poses is None:
        inv_off = invert(rec.camera_offset)
        tool_poses = [compose(p, inv_off) for p in rec.poses]
    for order, press in enumerate(edges_up):
        release = None
        for j in range(press + 1, n):
            if button[j] == 0:
                release = j
                break
        truncated = release is None
        end = n if truncated else release
        pre = list(range(prev_release, press))
        post = list(range(press, end))
        attempts.append(
            PickAttempt(
                pre_grasp=pre,
                grasp_pose=tool_poses[press],
                post_grasp=post,
                pick_order=order,
                truncated=truncated,
            )
        )
        prev_release = end
    return attempts


_gripper_mask_cache: dict = {}


def static_gripper_mask(profile: Profile) -> np.ndarray:
    """Pixels the gripper may occupy in the wrist image, any opening."""
    key = (profile.camera.width, profile.camera.height, profile.name)
    cached = _gripper_mask_cache.get(key)
    if cached is not None:
        return cached
    k = profile.intrinsics()
    cam = profile.gripper.camera_offset()
    mask = np.zeros((k.height, k.width), dtype=bool)
    for opening in (profile.gripper.max_opening, 0.06, 0.02):
        state = GripperState(RigidTransform.identity(), opening, False)
        packed = pack_primitives(gripper_fingers(state, profile.gripper))
        _, depth, _ = render_packed(packed, k, cam)
        mask |= depth > 0
    mask = ndimage.binary_dilation(mask, iterations=2)
    _gripper_mask_cache[key] = mask
    return mask


def extract_object_mask(rec: EpisodeArchive, attempt: PickAttempt,
                        gripper_mask: np.ndarray,
                        var_threshold: float = 1e-5) -> np.ndarray:
    """Grasped-object pixels: depth-stationary through the post-grasp span."""
    h, w = rec.intrinsics.height, rec.intrinsics.width
    empty = np.zeros((h, w), dtype=bool)
    if len(attempt.post_grasp) < 3:
        attempt.truncated = True
        return empty
    stack = np.stack([rec.frame(i)[1] for i in attempt.post_grasp])
    valid = stack > 0
    frac = valid.mean(axis=0)
    masked = np.where(valid, stack, np.nan)
    with np.errstate(invalid="ignore"):
        var = np.nanvar(masked, axis=0)
    mask = (var < var_threshold) & (frac >= 0.8) & ~gripper_mask
    if not mask.any():
        return empty
    labels, count = ndimage.label(mask)
    if count == 0:
        return empty
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, count + 1))
    mask = labels == (1 + int(np.argmax(sizes)))
    if mask.sum() > 0.5 * mask.size:
        attempt.truncated = True   # whole-image "object" means a static recording
        return empty
    return mask


def _frustum_corners(pose: RigidTransform, k: CameraIntrinsics, near: float, far: float):
    xs = np.array([0.0, k.width])
    ys = np.array([0.0, k.height])
    corners = []
    for d in (near, far):
        for u in xs:
            for v in ys:
                corners.append([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])
    return pose.apply(np.asarray(corners))


def _in_frustum(points, pose: RigidTransform, k: CameraIntrinsics, near, far):
    local = (points - pose.translation) @ pose.rotation
    z = local[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * local[:, 0] / z + k.cx
        v = k.fy * local[:, 1] / z + k.cy
    return (z >= near) & (z <= far) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)


def frustum_iou(pose_a: RigidTransform, pose_b: RigidTransform, k: CameraIntrinsics,
                near: float = 0.1, far: float = 0.8, samples: int = 10_000,
                seed: int = 1234) -> float:
    """Monte Carlo IoU of two camera view frusta (pyramids clipped near/far)."""
    if not near < far:
        raise ValueError("need near < far")
    corners = np.concatenate([
        _frustum_corners(pose_a, k, near, far),
        _frustum_corners(pose_b, k, near, far),
    ])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(samples, 3))
    in_a = _in_frustum(pts, pose_a, k, near, far)
    in_b = _in_frustum(pts, pose_b, k, near, far)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return float(np.count_nonzero(in_a & in_b) / union)


def synthesize_samples(rec: EpisodeArchive, attempt: PickAttempt, profile: Profile,
                       rng=None) -> list:
    """Positive/negative action-view samples for one pick attempt."""
    if not attempt.pre_grasp:
        return []
    rng = rng if rng is not None else np.random.default_rng(0)
    k = rec.intrinsics
    kv = profile.view_intrinsics()
    offset = rec.camera_offset
    inv_off = invert(offset)
    vol = TsdfVolume(profile.volume)
    grasp_point = attempt.grasp_pose.translation
    samples = []
    m = len(attempt.pre_grasp)
    press_index = attempt.post_grasp[0] if attempt.post_grasp else attempt.pre_grasp[-1] + 1

    median = 0.5
    for i, frame_idx in enumerate(attempt.pre_grasp):
        color, depth = rec.frame(frame_idx)
        cam_pose = rec.poses[frame_idx]
        vol.integrate(color, depth, k, cam_pose)
        if np.any(depth > 0):
            median = median_valid_depth(depth, fallback=median)
        tool_pose = compose(cam_pose, inv_off)

        next_idx = attempt.pre_grasp[i + 1] if i + 1 < m else press_index
        if next_idx >= len(rec.poses):
            continue
        target_cam = rec.poses[next_idx]

        candidates = [
            c for c in generate_actions(median, tool_pose, profile.workspace, profile.policy)
            if c.feasible
        ]
        views = render_candidate_views(vol, candidates, tool_pose, profile)
        ious = np.array([
            frustum_iou(v.pose, target_cam, kv, seed=frame_idx * 101 + j)
            for j, v in enumerate(views)
        ])
        ranking = np.argsort(-ious, kind="stable")
        best = int(ranking[0])
        if ious[best] < MIN_POSITIVE_IOU:
            log.warning("%s frame %d: best view IoU %.3f below threshold, skipping step",
                        rec.path, frame_idx, ious[best])
            continue
        q = DISCOUNT ** (m - 1 - i)
        negatives_pool = [int(r) for r in ranking[1 + DISCARD_RANKS:]]
        if len(negatives_pool) < NEGATIVES_PER_POSITIVE:
            continue
        chosen_neg = rng.choice(len(negatives_pool), size=NEGATIVES_PER_POSITIVE, replace=False)
        picked = [(best, 1, q)] + [(negatives_pool[j], 0, 0.0) for j in chosen_neg]
        for view_idx, label, target in picked:
            view = views[view_idx]
            samples.append(
                LabeledSample(
                    archive=str(rec.path),
                    frame=frame_idx,
                    view=pack_f16(view_tensor(view, profile.camera.max_depth)),
                    label=label,
                    q_target=float(target),
                    grasp_pixel=_project_pixel(grasp_point, view.pose, kv),
                )
            )
    return samples


def _project_pixel(point, cam_pose: RigidTransform, k: CameraIntrinsics) -> tuple:
    local = cam_pose.rotation.T @ (np.asarray(point) - cam_pose.translation)
    if local[2] <= 1e-6:
        return (-1, -1)
    u = k.fx * local[0] / local[2] + k.cx
    v = k.fy * local[1] / local[2] + k.cy
    if 0 <= u < k.width and 0 <= v < k.height:
        return (int(v), int(u))
    return (-1, -1)


def process_archive(path, profile: Profile, rng=None) -> tuple:
    """All samples from one episode archive; returns (samples, attempts)."""
    rec = load_archive(path)
    gm = static_gripper_mask(profile)
    attempts = segment_attempts(rec)
    samples = []
    for attempt in attempts:
        attempt.object_mask = extract_object_mask(rec, attempt, gm)
        samples.extend(synthesize_samples(rec, attempt, profile, rng=rng))
    return samples, attempts


def save_dataset(samples: list, out_dir, profile: Profile) -> Path:
    """Write a sample set: samples.npz plus a meta.json index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    archives = sorted({s.archive for s in samples})
    arch_index = {a: i for i, a in enumerate(archives)}
    views = np.stack([s.view for s in samples]) if samples else np.zeros((0, 7, 1, 1), np.float16)
    np.savez_compressed(
        out / "samples.npz",
        views=views,
        label=np.array([s.label for s in samples], dtype=np.uint8),
        q=np.array([s.q_target for s in samples], dtype=np.float32),
        pixel=np.array([s.grasp_pixel for s in samples], dtype=np.int16).reshape(-1, 2),
        archive_idx=np.array([arch_index[s.archive] for s in samples], dtype=np.int32),
        frame_idx=np.array([s.frame for s in samples], dtype=np.int32),
    )
    meta = {
        "archives": archives,
        "profile": profile.name,
        "count": len(samples),
        "positives": int(sum(s.label for s in samples)),
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=1)
    return out


class SampleDataset:
    """Loads a saved sample set and assembles training batches.

    State observations are rebuilt from the referenced episode archives on
    demand and cached (bounded) as 7-channel float16 tensors.
    """

    def __init__(self, path, profile: Profile, cache_bytes: int = 3 * 1024**3):
        from .features import obs_tensor  # local import to keep module load light

        self._obs_tensor = obs_tensor
        self.path = Path(path)
        with open(self.path / "meta.json") as f:
            self.meta = json.load(f)
        data = np.load(self.path / "samples.npz")
        self.views = data["views"]
        self.label = data["label"]
        self.q = data["q"]
        self.pixel = data["pixel"]
        self.archive_idx = data["archive_idx"]
        self.frame_idx = data["frame_idx"]
        self.profile = profile
        self._recs: dict = {}
        self._cache: dict = {}
        self._cache_bytes = 0
        self._cache_limit = cache_bytes

    def __len__(self):
        return len(self.label)

    def _state(self, a_idx: int, frame: int) -> np.ndarray:
        key = (int(a_idx), int(frame))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        rec = self._recs.get(a_idx)
        if rec is None:
            rec = load_archive(self.meta["archives"][a_idx])
            self._recs[a_idx] = rec
        color, depth = rec.frame(frame)
        state = pack_f16(self._obs_tensor(color, depth, rec.intrinsics,
                                          self.profile.camera.max_depth))
        if self._cache_bytes + state.nbytes <= self._cache_limit:
            self._cache[key] = state
            self._cache_bytes += state.nbytes
        return state

    def batch(self, indices) -> tuple:
        """(states, views, pixels, targets) float32 arrays for train_step."""
        states = np.stack([
            self._state(self.archive_idx[i], self.frame_idx[i]).astype(np.float32)
            for i in indices
        ])
        views = self.views[indices].astype(np.float32)
        pixels = self.pixel[indices]
        targets = self.q[indices]
        return states, views, pixels, targets
