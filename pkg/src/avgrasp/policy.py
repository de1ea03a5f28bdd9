"""Closed-loop grasp control: action candidates, view scoring, episodes.

Action candidates are relative tool-frame transforms built from the
combinatorial set of 5 translations x 7 rotations, with magnitudes scaled
by the median observed depth (big bold moves far away, small careful
moves up close) and a constant forward bias. Candidate views rendered
from the TSDF are scored by a value function; the argmax (or an
epsilon-random choice) is executed. The gripper closes on a depth
heuristic and success is judged by the simulator's geometric oracle.
"""

from __future__ import annotations

import dataclasses
import math
import time

import numpy as np

from .config import PolicyConfig, Profile, WorkspaceConfig
from .features import obs_tensor, pack_f16, view_tensor
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    compose,
    estimate_normals,
    median_valid_depth,
)
from .tsdf import TsdfVolume

TRANSLATION_LABELS = ("+x", "-x", "+y", "-y", "+z")
ROTATION_LABELS = ("+Rx", "-Rx", "+Ry", "-Ry", "+Rz", "-Rz", "R0")
_ROT_AXES = {"Rx": (1.0, 0.0, 0.0), "Ry": (0.0, 1.0, 0.0), "Rz": (0.0, 0.0, 1.0)}


@dataclasses.dataclass
class ActionCandidate:
    transform: RigidTransform
    translation_label: str
    rotation_label: str
    feasible: bool = True
    index: int = 0


def action_scale(median_depth: float) -> tuple[float, float]:
    """(translation d in meters, rotation a in degrees) for a median depth."""
    ratio = max(0.0, min(1.0, (median_depth - 0.1) / 0.4))
    d = 0.015 + ratio * 0.035
    a = 10.0 + ratio * 20.0
    return d, a


def generate_actions(median_depth: float, pose: RigidTransform,
                     workspace: WorkspaceConfig,
                     cfg: PolicyConfig = PolicyConfig()) -> list[ActionCandidate]:
    """The 35 combinatorial candidates around the current tool pose.

    Candidates whose resulting pose leaves the workspace are marked
    infeasible. Every translation carries the +z forward offset.
    """
    d, a_deg = action_scale(median_depth)
    fwd = cfg.forward_offset
    translations = {
        "+x": (d, 0.0, fwd),
        "-x": (-d, 0.0, fwd),
        "+y": (0.0, d, fwd),
        "-y": (0.0, -d, fwd),
        "+z": (0.0, 0.0, d + fwd),
    }
    a = math.radians(a_deg)
    out = []
    idx = 0
    for t_label in TRANSLATION_LABELS:
        trans = translations[t_label]
        for r_label in ROTATION_LABELS:
            if r_label == "R0":
                tf = RigidTransform(np.eye(3), trans)
            else:
                sign = 1.0 if r_label[0] == "+" else -1.0
                axis = _ROT_AXES[r_label[1:]]
                tf = RigidTransform.from_axis_angle(axis, sign * a, trans)
            target = compose(pose, tf)
            feasible = workspace.contains(target.translation)
            out.append(ActionCandidate(tf, t_label, r_label, feasible, idx))
            idx += 1
    return out


def close_window(k: CameraIntrinsics, profile: Profile) -> tuple[int, int, int, int]:
    """(row0, row1, col0, col1) of the between-fingers depth window."""
    g = profile.gripper
    pol = profile.policy
    u0 = k.cx
    v0 = k.cy + k.fy * g.camera_up / g.camera_back  # fingertip midpoint projection
    hw = max(2, int(round(pol.window_frac_w * k.width / 2)))
    hh = max(2, int(round(pol.window_frac_h * k.height / 2)))
    r0 = int(np.clip(round(v0 - hh), 0, k.height - 1))
    r1 = int(np.clip(round(v0 + hh), 1, k.height))
    c0 = int(np.clip(round(u0 - hw), 0, k.width - 1))
    c1 = int(np.clip(round(u0 + hw), 1, k.width))
    return r0, r1, c0, c1


def should_close(depth: np.ndarray, k: CameraIntrinsics, profile: Profile,
                 fingertip_depth: float | None = None) -> bool:
    """Close when the nearest depth between the fingers is within reach."""
    if fingertip_depth is None:
        fingertip_depth = profile.gripper.fingertip_depth
    r0, r1, c0, c1 = close_window(k, profile)
    window = depth[r0:r1, c0:c1]
    valid = window[window > 0]
    if valid.size == 0:
        return False
    near = float(np.percentile(valid, profile.policy.close_percentile))
    return near < fingertip_depth - profile.policy.close_margin


def render_candidate_views(volume: TsdfVolume, candidates, pose: RigidTransform,
                           profile: Profile) -> list:
    """Raycast one virtual view per candidate from the fused volume."""
    kv = profile.view_intrinsics()
    offset = profile.gripper.camera_offset()
    views = []
    for c in candidates:
        cam = compose(compose(pose, c.transform), offset)
        views.append(volume.raycast(kv, cam))
    return views


def select_action(qfn, state_obs: np.ndarray, snapshot: TsdfVolume, candidates,
                  pose: RigidTransform, profile: Profile, epsilon: float, rng):
    """Greedy (or epsilon-random) choice among feasible candidate views.

    qfn is a callable (state_obs, view_tensors, candidates) -> scores.
    Returns (candidate, view, scores over the feasible set).
    """
    feasible = [c for c in candidates if c.feasible]
    if not feasible:
        raise RuntimeError("zero feasible action candidates")
    views = render_candidate_views(snapshot, feasible, pose, profile)
    tensors = np.stack([view_tensor(v, profile.camera.max_depth) for v in views])
    scores = np.asarray(qfn(state_obs, tensors, feasible), dtype=np.float64)
    if rng.random() < epsilon:
        pick = int(rng.integers(0, len(feasible)))
    else:
        pick = int(np.argmax(scores))  # ties resolve to the lowest index
    return feasible[pick], views[pick], scores


def qlearning_target(reward: float, terminal: bool, next_scores, discount: float) -> float:
    """One-step bootstrapped target: r + discount * max over next views."""
    if terminal:
        return float(reward)
    next_scores = np.asarray(next_scores)
    if next_scores.size == 0:
        return float(reward)
    return float(reward + discount * float(np.max(next_scores)))


@dataclasses.dataclass
class Transition:
    state: np.ndarray        # (7, H, W) float16
    view: np.ndarray         # (7, h, w) float16, the executed candidate's view
    action_index: int
    reward: float
    terminal: bool
    next_state: np.ndarray | None = None   # float16; None when terminal
    next_views: np.ndarray | None = None   # (n, 7, h, w) float16; None when terminal


class ReplayBuffer:
    """Bounded FIFO with uniform, seed-deterministic sampling."""

    def __init__(self, capacity: int = 50_000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, tr: Transition) -> None:
        if tr.terminal and (tr.next_views is not None or tr.next_state is not None):
            raise ValueError("terminal transitions carry no next state")
        if tr.reward not in (0.0, 1.0):
            raise ValueError("rewards are binary")
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
            self._next = (self._next + 1) % self.capacity

    def sample(self, n: int, rng) -> list[Transition]:
        if not self._items:
            raise ValueError("buffer is empty")
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]


@dataclasses.dataclass
class EpisodeResult:
    success: bool
    steps: int
    reward: float
    failure_reason: str | None
    aborted: bool
    step_seconds: list
    perturbed_at: int | None = None

    def latency_stats(self) -> dict:
        if not self.step_seconds:
            return {"mean": 0.0, "p50": 0.0, "p95": 0.0}
        arr = np.asarray(self.step_seconds)
        return {
            "mean": float(arr.mean()),
            "p50": float(np.percentile(arr, 50)),
            "p95": float(np.percentile(arr, 95)),
        }


def run_episode(env, qfn, profile: Profile, mode: str = "static", rng=None,
                replay: ReplayBuffer | None = None, epsilon: float = 0.0,
                freeze_tsdf: bool = False) -> EpisodeResult:
    """One closed-loop grasp attempt, optionally logging replay transitions.

    qfn None plays uniformly random feasible actions (no views rendered,
    no transitions recorded). mode "dynamic" perturbs the pile once at a
    random mid-episode step. freeze_tsdf stops fusion after the first
    frame (ablation), making the map stale under perturbation.
    """
    if mode not in ("static", "dynamic"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng()
    pol = profile.policy
    k = profile.intrinsics()
    vol = TsdfVolume(profile.volume)
    perturb_at = int(rng.integers(3, 10)) if mode == "dynamic" else None

    collect = replay is not None and qfn is not None
    median = 0.5
    pending = None  # (state f16, view f16, action_index) awaiting s_{t+1}
    step_seconds = []
    success = False
    reward = 0.0
    failure = None
    aborted = False
    steps = 0

    for t in range(pol.max_steps):
        t_start = time.perf_counter()
        steps = t + 1
        if perturb_at is not None and t == perturb_at:
            env.perturb(rng)
        color, depth, _mask = env.render()
        normals = estimate_normals(depth, k)
        state = obs_tensor(color, depth, k, profile.camera.max_depth, normals)
        if not freeze_tsdf or t == 0:
            vol.integrate(color, depth, k, env.camera_pose())
        if np.any(depth > 0):
            median = median_valid_depth(depth, fallback=median)

        candidates = generate_actions(median, env.gripper.pose, profile.workspace, pol)
        feasible = [c for c in candidates if c.feasible]

        if should_close(depth, k, profile):
            outcome = env.close_and_lift()
            success = outcome.success
            reward = 1.0 if success else 0.0
            failure = outcome.failure_reason
            if pending is not None and collect:
                st, vw, ai = pending
                replay.add(Transition(st, vw, ai, reward, True))
            step_seconds.append(time.perf_counter() - t_start)
            break

        if not feasible:
            aborted = True
            failure = "no-feasible-action"
            if pending is not None and collect:
                st, vw, ai = pending
                replay.add(Transition(st, vw, ai, 0.0, True))
            break

        if qfn is None:
            choice = feasible[int(rng.integers(0, len(feasible)))]
            env.apply(choice.transform)
            step_seconds.append(time.perf_counter() - t_start)
            continue

        views = render_candidate_views(vol, feasible, env.gripper.pose, profile)
        tensors = np.stack([view_tensor(v, profile.camera.max_depth) for v in views])
        scores = np.asarray(qfn(state, tensors, feasible), dtype=np.float64)
        if rng.random() < epsilon:
            pick = int(rng.integers(0, len(feasible)))
        else:
            pick = int(np.argmax(scores))
        choice = feasible[pick]
        if collect:
            state16 = pack_f16(state)
            if pending is not None:
                st, vw, ai = pending
                replay.add(Transition(st, vw, ai, 0.0, False, state16, pack_f16(tensors)))
            pending = (state16, pack_f16(tensors[pick]), choice.index)
        env.apply(choice.transform)
        step_seconds.append(time.perf_counter() - t_start)
    else:
        # step budget exhausted without a close
        if pending is not None and collect:
            st, vw, ai = pending
            replay.add(Transition(st, vw, ai, 0.0, True))

    return EpisodeResult(success, steps, reward, failure, aborted, step_seconds, perturb_at)
