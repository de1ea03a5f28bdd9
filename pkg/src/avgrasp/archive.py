"""Episode archives: one directory per recorded grasp attempt session.

Layout:
    manifest.json            metadata, poses, button signal (schema below)
    frame_000000.color.ppm   binary P6, 8-bit RGB
    frame_000000.depth.raw   little-endian float32 meters, row-major

Manifest schema (version 1):
    schema_version  int
    source          "human" | "scripted"
    width, height   frame dimensions
    intrinsics      {fx, fy, cx, cy}
    camera_offset   16 row-major numbers; camera pose in the tool frame
    frame_count     int, equals the number of frame file pairs
    poses           frame_count x 16 row-major camera-to-world matrices
    button          frame_count 0/1 gripper-close bits
    timestamps      frame_count strictly increasing seconds
    sim             {seed, config, profile, n_objects} when simulator-sourced
    outcome         {success, reason, object_uid} when known
    scene           embedded scene description (optional, debugging aid)

Archives written by the teleop service and by the scripted demonstrator
are schema-identical apart from `source`.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RigidTransform

SCHEMA_VERSION = 1


class ArchiveError(Exception):
    pass


@dataclasses.dataclass
class EpisodeArchive:
    path: Path
    source: str
    intrinsics: CameraIntrinsics
    camera_offset: RigidTransform
    poses: list            # camera-to-world RigidTransforms
    button: np.ndarray     # (N,) uint8
    timestamps: np.ndarray  # (N,) float64
    sim: dict | None = None
    outcome: dict | None = None
    scene_json: str | None = None

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    def frame(self, i: int):
        """(color, depth) for frame i, lazily read from disk."""
        color = read_ppm(self.path / f"frame_{i:06d}.color.ppm")
        depth = read_depth_raw(self.path / f"frame_{i:06d}.depth.raw",
                               self.intrinsics.height, self.intrinsics.width)
        return color, depth


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ArchiveError(f"{path}: not a binary PPM")
    # header: magic, dims, maxval, separated by whitespace; no comments written
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise ArchiveError(f"{path}: truncated PPM header")
    w, h = (int(x) for x in parts[1].split())
    pixels = parts[3]
    expected = w * h * 3
    if len(pixels) < expected:
        raise ArchiveError(f"{path}: truncated PPM payload")
    return np.frombuffer(pixels[:expected], dtype=np.uint8).reshape(h, w, 3).copy()


def write_depth_raw(path, depth: np.ndarray) -> None:
    np.ascontiguousarray(depth, dtype="<f4").tofile(path)


def read_depth_raw(path, height: int, width: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != height * width:
        raise ArchiveError(f"{path}: expected {height * width} floats, found {data.size}")
    return data.reshape(height, width)


class ArchiveWriter:
    """Streams frames of one episode to disk, then finalizes the manifest."""

    def __init__(self, path, source: str, intrinsics: CameraIntrinsics,
                 camera_offset: RigidTransform, sim: dict | None = None,
                 scene_json: str | None = None):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.source = source
        self.intrinsics = intrinsics
        self.camera_offset = camera_offset
        self.sim = sim
        self.scene_json = scene_json
        self.poses = []
        self.button = []
        self.timestamps = []
        self.outcome = None

    def add_frame(self, color, depth, cam_pose: RigidTransform, button: int, timestamp: float) -> None:
        i = len(self.poses)
        write_ppm(self.path / f"frame_{i:06d}.color.ppm", color)
        write_depth_raw(self.path / f"frame_{i:06d}.depth.raw", depth)
        self.poses.append(cam_pose)
        self.button.append(int(button))
        self.timestamps.append(float(timestamp))

    def set_outcome(self, success: bool, reason=None, object_uid=None) -> None:
        self.outcome = {"success": bool(success), "reason": reason, "object_uid": object_uid}

    def finalize(self) -> Path:
        k = self.intrinsics
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "source": self.source,
            "width": k.width,
            "height": k.height,
            "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
            "camera_offset": self.camera_offset.matrix().reshape(-1).tolist(),
            "frame_count": len(self.poses),
            "poses": [p.matrix().reshape(-1).tolist() for p in self.poses],
            "button": self.button,
            "timestamps": self.timestamps,
            "sim": self.sim,
            "outcome": self.outcome,
            "scene": self.scene_json,
        }
        with open(self.path / "manifest.json", "w") as f:
            json.dump(manifest, f)
        return self.path


def validate_manifest(manifest: dict, path: Path | None = None) -> list:
    """Schema check; returns a list of problems (empty when valid)."""
    problems = []
    for key in ("schema_version", "source", "width", "height", "intrinsics",
                "camera_offset", "frame_count", "poses", "button", "timestamps"):
        if key not in manifest:
            problems.append(f"missing key {key!r}")
    if problems:
        return problems
    if manifest["schema_version"] != SCHEMA_VERSION:
        problems.append(f"unsupported schema_version {manifest['schema_version']}")
    if manifest["source"] not in ("human", "scripted"):
        problems.append(f"bad source {manifest['source']!r}")
    n = manifest["frame_count"]
    for key in ("poses", "button", "timestamps"):
        if len(manifest[key]) != n:
            problems.append(f"{key} length {len(manifest[key])} != frame_count {n}")
    ts = manifest["timestamps"]
    if any(b - a <= 0 for a, b in zip(ts, ts[1:])):
        problems.append("timestamps not strictly increasing")
    if any(b not in (0, 1) for b in manifest["button"]):
        problems.append("button bits must be 0/1")
    for i, p in enumerate(manifest["poses"]):
        m = np.asarray(p, dtype=np.float64).reshape(4, 4)
        t = RigidTransform.from_matrix(m)
        if not t.is_valid(tol=1e-5):
            problems.append(f"pose {i} is not a valid SE(3) matrix")
            break
    if path is not None:
        for i in range(n):
            if not (path / f"frame_{i:06d}.color.ppm").exists():
                problems.append(f"missing frame_{i:06d}.color.ppm")
                break
            if not (path / f"frame_{i:06d}.depth.raw").exists():
                problems.append(f"missing frame_{i:06d}.depth.raw")
                break
    return problems


def load_archive(path) -> EpisodeArchive:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise ArchiveError(f"{path}: no manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    problems = validate_manifest(manifest, path)
    if problems:
        raise ArchiveError(f"{path}: invalid archive: " + "; ".join(problems))
    ki = manifest["intrinsics"]
    k = CameraIntrinsics(ki["fx"], ki["fy"], ki["cx"], ki["cy"], manifest["width"], manifest["height"])
    poses = [RigidTransform.from_matrix(np.asarray(p).reshape(4, 4)) for p in manifest["poses"]]
    return EpisodeArchive(
        path=path,
        source=manifest["source"],
        intrinsics=k,
        camera_offset=RigidTransform.from_matrix(np.asarray(manifest["camera_offset"]).reshape(4, 4)),
        poses=poses,
        button=np.asarray(manifest["button"], dtype=np.uint8),
        timestamps=np.asarray(manifest["timestamps"], dtype=np.float64),
        sim=manifest.get("sim"),
        outcome=manifest.get("outcome"),
        scene_json=manifest.get("scene"),
    )


def list_archives(root) -> list:
    """All archive directories under root (sorted), skipping invalid ones."""
    root = Path(root)
    out = []
    for p in sorted(root.iterdir()) if root.exists() else []:
        if p.is_dir() and (p / "manifest.json").exists():
            out.append(p)
    return out
