"""Experiment orchestration: collect, process, pretrain, finetune, evaluate.

Everything here is seed-deterministic; reports land as JSON + CSV +
figures via the report module.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from .archive import ArchiveError, ArchiveWriter, load_archive, list_archives
from .config import Profile
from .features import unpack_f16
from .geometry import compose, invert
from .nn import Adam, Network, QFunction
from .pipeline import SampleDataset, process_archive, save_dataset
from .policy import ReplayBuffer, run_episode, render_candidate_views, generate_actions
from .sim import GraspEnv, run_scripted_episode
from .sim.demonstrator import _narrow_direction
from .tsdf import TsdfVolume

log = logging.getLogger(__name__)


# -- data collection ---------------------------------------------------------


def collect_scripted(out_root, config: str, n: int, seed: int, profile: Profile,
                     n_objects=None) -> list:
    """Record n scripted demonstration archives under out_root.

    n_objects None cycles through small pile sizes for variety. Deterministic
    per (config, seed): timestamps are synthetic (15 Hz), so reruns are
    byte-identical.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(n):
        ep_seed = seed * 1_000_003 + i
        count = n_objects if n_objects is not None else [1, 1, 2, 3][i % 4]
        env = GraspEnv.make(config, seed=ep_seed, profile=profile, n_objects=count)
        rng = np.random.default_rng(ep_seed ^ 0xC0FFEE)
        try:
            ep = run_scripted_episode(env, rng)
        except ValueError as e:
            log.warning("episode %d skipped: %s", i, e)
            continue
        path = out_root / f"ep_{seed:05d}_{i:05d}"
        writer = ArchiveWriter(
            path, source="scripted", intrinsics=profile.intrinsics(),
            camera_offset=profile.gripper.camera_offset(),
            sim={"seed": ep_seed, "config": config, "profile": profile.name,
                 "n_objects": count},
            scene_json=ep.scene_json,
        )
        for j, ((color, depth), pose, bit) in enumerate(zip(ep.frames, ep.poses, ep.button)):
            writer.add_frame(color, depth, pose, bit, timestamp=j / 15.0)
        if ep.outcome is not None:
            writer.set_outcome(ep.outcome.success, ep.outcome.failure_reason, ep.target_uid)
        writer.finalize()
        written.append(path)
    return written


def process_dataset(data_root, out_dir, profile: Profile, seed: int = 0) -> dict:
    """Run the demonstration pipeline over every archive under data_root."""
    rng = np.random.default_rng(seed)
    samples = []
    stats = {"archives": 0, "skipped": 0, "no_press": 0, "attempts": 0}
    for path in list_archives(data_root):
        try:
            s, attempts = process_archive(path, profile, rng=rng)
        except (ArchiveError, OSError) as e:
            log.error("skipping %s: %s", path, e)
            stats["skipped"] += 1
            continue
        stats["archives"] += 1
        stats["attempts"] += len(attempts)
        if not attempts:
            log.warning("%s: no button press, no samples", path)
            stats["no_press"] += 1
        samples.extend(s)
    save_dataset(samples, out_dir, profile)
    stats["samples"] = len(samples)
    stats["positives"] = int(sum(s.label for s in samples))
    return stats


# -- training ----------------------------------------------------------------


def pretrain(dataset_dir, params_out, profile: Profile, epochs: int = 3,
             seed: int = 0, lr: float | None = None, log_path=None) -> dict:
    """Supervised bootstrap of the value network from demonstration samples."""
    ds = SampleDataset(dataset_dir, profile)
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    net = Network(dataclasses.replace(profile.net, seed=seed))
    opt = Adam(lr=lr if lr is not None else profile.train.lr,
               beta1=profile.train.adam_beta1, beta2=profile.train.adam_beta2,
               eps=profile.train.adam_eps)
    rng = np.random.default_rng(seed)
    bs = profile.train.batch_size
    losses = []
    t0 = time.time()
    for epoch in range(epochs):
        order = rng.permutation(len(ds))
        for k in range(0, len(ds) - bs + 1, bs):
            idx = order[k:k + bs]
            states, views, pixels, targets = ds.batch(idx)
            loss = net.train_step(states, views, pixels, targets, opt)
            losses.append(float(loss))
        log.info("pretrain epoch %d/%d: mean loss %.4f", epoch + 1, epochs,
                 float(np.mean(losses[-max(1, len(ds) // bs):])))
    net.save(params_out)
    info = {
        "samples": len(ds), "epochs": epochs, "batch_size": bs,
        "final_loss": float(np.mean(losses[-50:])) if losses else None,
        "seconds": time.time() - t0,
        "loss_curve": losses[:: max(1, len(losses) // 200)],
    }
    if log_path:
        with open(log_path, "w") as f:
            json.dump(info, f, indent=1, default=float)
    return info


def _qlearning_update(net: Network, target_net: Network, replay: ReplayBuffer,
                      opt, rng, discount: float, batch_size: int) -> float:
    batch = replay.sample(batch_size, rng)
    states = np.stack([unpack_f16(t.state) for t in batch])
    views = np.stack([unpack_f16(t.view) for t in batch])
    targets = np.empty(len(batch), dtype=np.float32)
    nt_states, nt_views, nt_group, nt_pos = [], [], [], []
    for i, tr in enumerate(batch):
        if tr.terminal:
            targets[i] = tr.reward
        else:
            nt_pos.append(i)
            nt_group.extend([len(nt_states)] * len(tr.next_views))
            nt_views.append(unpack_f16(tr.next_views))
            nt_states.append(unpack_f16(tr.next_state))
    if nt_states:
        best = target_net.score_view_groups(
            np.stack(nt_states), np.concatenate(nt_views), np.asarray(nt_group)
        )
        for j, i in enumerate(nt_pos):
            bootstrap = best[j] if np.isfinite(best[j]) else 0.0
            targets[i] = batch[i].reward + discount * bootstrap
    # supervision lands on the executed view's argmax pixel
    pixels = np.full((len(batch), 2), -1, dtype=np.int64)
    return net.train_step(states, views, pixels, np.clip(targets, 0.0, 1.0), opt)


def finetune(params_in, params_out, profile: Profile, config: str = "tabletop",
             episodes: int = 1000, seed: int = 0, checkpoints=(),
             objects_range=(1, 3), from_scratch: bool = False,
             log_path=None) -> dict:
    """Trial-and-error fine-tuning with epsilon-greedy exploration and replay.

    params_in None (or from_scratch) starts from a fresh network. Saves
    intermediate parameter files at the given episode checkpoints
    (params_out stem + _ck{N}).
    """
    if params_in is None or from_scratch:
        net = Network(dataclasses.replace(profile.net, seed=seed + 17))
    else:
        net = Network.load(params_in)
    target_net = net.clone()
    opt = Adam(lr=profile.train.lr, beta1=profile.train.adam_beta1,
               beta2=profile.train.adam_beta2, eps=profile.train.adam_eps)
    qfn = QFunction(net)
    replay = ReplayBuffer(min(profile.train.replay_capacity, 4000))
    rng = np.random.default_rng(seed)
    pol = profile.policy
    sync_every = profile.train.target_sync_every
    updates = 0
    history = []
    params_out = Path(params_out)
    t0 = time.time()
    for ep in range(episodes):
        n_obj = int(rng.integers(objects_range[0], objects_range[1] + 1))
        env = GraspEnv.make(config, seed=seed * 9_000_001 + ep, profile=profile,
                            n_objects=n_obj)
        eps = pol.epsilon_at(ep)
        result = run_episode(env, qfn, profile, mode="static", rng=rng,
                             replay=replay, epsilon=eps)
        loss = None
        if len(replay) >= 400:
            for _ in range(profile.train.updates_per_episode):
                loss = _qlearning_update(net, target_net, replay, opt, rng,
                                         pol.discount, profile.train.batch_size)
                updates += 1
                if sync_every and updates % sync_every == 0:
                    target_net.copy_from(net)
        history.append({"episode": ep, "success": result.success, "steps": result.steps,
                        "epsilon": eps, "loss": loss, "buffer": len(replay)})
        if ep + 1 in checkpoints:
            net.save(params_out.parent / f"{params_out.stem}_ck{ep + 1}{params_out.suffix}")
        if log_path and (ep + 1) % 25 == 0:
            with open(log_path, "w") as f:
                json.dump(history, f, default=float)
    net.save(params_out)
    if log_path:
        with open(log_path, "w") as f:
            json.dump(history, f, default=float)
    wins = sum(1 for h in history if h["success"])
    return {"episodes": episodes, "successes": wins, "updates": updates,
            "seconds": time.time() - t0, "history": history}


# -- evaluation --------------------------------------------------------------


class OracleScorer:
    """Upper-bound scorer using simulator ground truth.

    Scores a candidate by where the nearest graspable object would sit in
    the candidate's tool frame: keep it on the tool axis (rotations about
    the fingertip origin are the fine lateral control), advance until its
    center reaches the closure region, and never overshoot.
    """

    def __init__(self, env: GraspEnv, profile: Profile):
        self.env = env
        self.profile = profile

    def __call__(self, state_obs, view_tensors, candidates):
        g = self.profile.gripper
        targets = [o for o in self.env.scene.objects
                   if o.min_graspable_extent() <= g.max_opening - 0.004]
        if not targets:
            return np.zeros(len(candidates))
        centers = np.stack([o.pose.translation for o in targets])
        pose = self.env.gripper.pose
        grab_z = -g.finger_length / 2
        here = np.linalg.norm(centers - pose.translation, axis=1)
        pick = int(np.argmin(here))
        target_obj = targets[pick]
        target = centers[pick]
        up = self.env.scene.support.normal
        narrow = _narrow_direction(target_obj, up, g.max_opening,
                                   np.random.default_rng(target_obj.uid))
        scores = []
        for cand in candidates:
            tool = compose(pose, cand.transform)
            local = tool.rotation.T @ (target - tool.translation)
            lateral = float(np.hypot(local[0], local[1]))
            ahead = float(local[2] - grab_z)
            overshoot = max(0.0, -ahead)
            # steep finger spans clip the support before the grasp depth is
            # reachable; demonstrators right themselves the same way
            tilt = float(np.arccos(np.clip(np.dot(tool.rotation[:, 2], -up), -1, 1)))
            tilt_excess = max(0.0, tilt - 0.15)
            # fingers must straddle the narrow side, not scrape the long one
            misalign = 1.0 - abs(float(np.dot(tool.rotation[:, 0], narrow)))
            scores.append(-(2.5 * lateral + 0.5 * max(ahead, 0.0) + 4.0 * overshoot
                            + 0.3 * tilt_excess + 0.3 * misalign))
        return np.asarray(scores)


def evaluate(params, profile: Profile, config: str = "tabletop", episodes: int = 100,
             mode: str = "static", seed: int = 0, n_objects=1, pile_size: int = 5,
             runs: int = 10, policy: str = "net", freeze_tsdf: bool = False) -> dict:
    """Grasp-success evaluation; returns an ExperimentReport dict.

    policy: "net" scores views with the loaded parameters, "random" picks
    uniform feasible actions, "oracle" uses simulator ground truth.
    mode "static": independent single-attempt episodes. mode "dynamic":
    Fig.-5-style runs on a pile, one mid-episode perturbation per attempt,
    run ends when the pile is empty or after 3 consecutive failures.
    """
    net = Network.load(params) if (policy == "net" and params is not None) else None
    qfn = QFunction(net) if net is not None else None
    rng = np.random.default_rng(seed)
    results = []
    t0 = time.time()

    if mode == "static":
        for ep in range(episodes):
            n_obj = n_objects if isinstance(n_objects, int) else int(rng.integers(*n_objects))
            env = GraspEnv.make(config, seed=seed * 7_777_777 + ep, profile=profile,
                                n_objects=n_obj)
            scorer = qfn if policy != "oracle" else OracleScorer(env, profile)
            result = run_episode(env, scorer, profile, mode="static", rng=rng,
                                 epsilon=1.0 if policy == "random" else 0.0,
                                 freeze_tsdf=freeze_tsdf)
            results.append(result)
    elif mode == "dynamic":
        for run in range(runs):
            env = GraspEnv.make(config, seed=seed * 5_555_555 + run, profile=profile,
                                n_objects=pile_size)
            consecutive_failures = 0
            while env.scene.objects and consecutive_failures < 3:
                env.reset_start_pose()
                env.gripper = dataclasses.replace(
                    env.gripper, opening=profile.gripper.max_opening, closed=False)
                scorer = qfn if policy != "oracle" else OracleScorer(env, profile)
                result = run_episode(env, scorer, profile, mode="dynamic", rng=rng,
                                     epsilon=1.0 if policy == "random" else 0.0,
                                     freeze_tsdf=freeze_tsdf)
                results.append(result)
                consecutive_failures = 0 if result.success else consecutive_failures + 1
    else:
        raise ValueError(f"unknown mode {mode!r}")

    successes = sum(1 for r in results if r.success)
    all_lat = [s for r in results for s in r.step_seconds]
    lat = np.asarray(all_lat) if all_lat else np.zeros(1)
    return {
        "config": config,
        "mode": mode,
        "policy": policy,
        "params": str(params) if params else None,
        "seed": seed,
        "n_objects": n_objects if mode == "static" else pile_size,
        "episode_count": len(results),
        "successes": successes,
        "success_rate": successes / max(1, len(results)),
        "latency_seconds": {
            "mean": float(lat.mean()),
            "p50": float(np.percentile(lat, 50)),
            "p95": float(np.percentile(lat, 95)),
        },
        "seconds": time.time() - t0,
        "episodes": [
            {"success": r.success, "steps": r.steps, "reward": r.reward,
             "failure_reason": r.failure_reason,
             "step_seconds": [round(s, 5) for s in r.step_seconds]}
            for r in results
        ],
    }


# -- latency ------------------------------------------------------------------


def measure_latency(profile: Profile, view_height: int = 45, view_width: int = 80,
                    seed: int = 0) -> dict:
    """One full action step at action-view resolution view_height x view_width.

    Reports fuse / render-35-views / 35-network-forwards timings separately
    and their total, using the profile's network widths.
    """
    from .config import CameraConfig, VolumeConfig
    from .features import obs_tensor, view_tensor
    from .geometry import estimate_normals

    red = profile.net.state_reduction
    view_profile = dataclasses.replace(
        profile,
        view_height=view_height,
        view_width=view_width,
        camera=dataclasses.replace(profile.camera, width=view_width * red,
                                   height=view_height * red),
        volume=VolumeConfig(origin=(-0.32, -0.32, -0.05), extent=(0.64, 0.64, 0.64),
                            voxel_size=0.005),
    )
    env = GraspEnv.make("tabletop", seed=seed, profile=view_profile, n_objects=3)
    k = view_profile.intrinsics()
    net = Network(view_profile.net)
    vol = TsdfVolume(view_profile.volume)

    color, depth, _ = env.render()
    normals = estimate_normals(depth, k)
    state = obs_tensor(color, depth, k, view_profile.camera.max_depth, normals)
    candidates = [c for c in generate_actions(0.5, env.gripper.pose, view_profile.workspace,
                                              view_profile.policy) if c.feasible]

    # warm every kernel once
    vol.integrate(color, depth, k, env.camera_pose())
    views = render_candidate_views(vol, candidates, env.gripper.pose, view_profile)
    tensors = np.stack([view_tensor(v, view_profile.camera.max_depth) for v in views])
    net.score_views(state, tensors)

    timings = {}
    t0 = time.perf_counter()
    color, depth, _ = env.render()
    normals = estimate_normals(depth, k)
    state = obs_tensor(color, depth, k, view_profile.camera.max_depth, normals)
    timings["observe"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    vol.integrate(color, depth, k, env.camera_pose())
    timings["fuse"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    views = render_candidate_views(vol, candidates, env.gripper.pose, view_profile)
    timings["render_views"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tensors = np.stack([view_tensor(v, view_profile.camera.max_depth) for v in views])
    net.score_views(state, tensors)
    timings["network"] = time.perf_counter() - t0

    timings["total"] = sum(timings.values())
    timings["n_views"] = len(views)
    timings["view_resolution"] = f"{view_height}x{view_width}"
    timings["state_resolution"] = f"{k.height}x{k.width}"
    timings["widths"] = [view_profile.net.width1, view_profile.net.width2]
    return timings
