"""Teleoperation service: a websocket endpoint for human demonstrations.

One simulator session per connection. The client steers the gripper with
incremental 6DoF moves and a close trigger; the server streams wrist
camera frames (lossy over the wire) while recording lossless episode
archives server-side.

Wire protocol (schema version 1), JSON text messages:
  client -> server
    {"type": "start"}                     begin an episode (new scene)
    {"type": "reset"}                     new scene, discard unsaved episode
    {"type": "stop"}                      finish episode, write the archive
    {"type": "move", "dx","dy","dz" (m), "drx","dry","drz" (deg)}
    {"type": "close"}                     trigger the gripper
  server -> client
    {"type": "hello", "schema": 1, "config", "seed"}
    {"type": "started", "seed"}
    {"type": "frame", "seq", "pose": [16 row-major], "gripper_state":
        {"opening", "closed"}, "png_b64"}
    {"type": "outcome", "success", "reason"}
    {"type": "stopped", "path", "frames"}
    {"type": "error", "msg"}

Per-message motion is clamped to 0.05 m / 30 deg and frames stream at
most at 15 Hz.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from PIL import Image

from .archive import ArchiveWriter
from .config import Profile
from .geometry import RigidTransform
from .sim import GraspEnv

log = logging.getLogger(__name__)

SCHEMA = 1
MAX_STEP_M = 0.05
MAX_STEP_DEG = 30.0
MIN_FRAME_INTERVAL = 1.0 / 15.0


class TeleopSession:
    """State for one connected client."""

    def __init__(self, profile: Profile, config: str, out_root: Path, seed: int):
        self.profile = profile
        self.config = config
        self.out_root = Path(out_root)
        self.seed = seed
        self.env: GraspEnv | None = None
        self.writer: ArchiveWriter | None = None
        self.recording = False
        self.seq = 0
        self.episode_index = 0
        self._last_frame_time = 0.0

    # -- episode control ----------------------------------------------------

    def start(self) -> dict:
        if self.recording:
            return {"type": "error", "msg": "episode already running; stop or reset first"}
        ep_seed = self.seed + self.episode_index
        self.env = GraspEnv.make(self.config, seed=ep_seed, profile=self.profile,
                                 n_objects=None)
        path = self.out_root / f"teleop_{self.seed:05d}_{self.episode_index:05d}"
        self.writer = ArchiveWriter(
            path, source="human", intrinsics=self.profile.intrinsics(),
            camera_offset=self.profile.gripper.camera_offset(),
            sim={"seed": ep_seed, "config": self.config, "profile": self.profile.name,
                 "n_objects": len(self.env.scene.objects)},
            scene_json=self.env.scene.to_json(),
        )
        self.recording = True
        self.episode_index += 1
        self._record(button=0)
        return {"type": "started", "seed": ep_seed}

    def reset(self) -> dict:
        self.recording = False
        self.writer = None
        self.env = None
        return {"type": "hello", "schema": SCHEMA, "config": self.config, "seed": self.seed}

    def stop(self) -> dict:
        if self.writer is None:
            return {"type": "error", "msg": "no episode to stop"}
        path = self.writer.finalize()
        frames = self.writer.poses and len(self.writer.poses) or 0
        self.recording = False
        self.writer = None
        return {"type": "stopped", "path": str(path), "frames": frames}

    def flush_incomplete(self):
        if self.writer is not None and self.writer.poses:
            self.writer.finalize()
            log.info("flushed incomplete episode to %s", self.writer.path)

    # -- commands -------------------------------------------------------------

    def move(self, msg: dict) -> dict:
        if not self.recording or self.env is None:
            return {"type": "error", "msg": "no active episode"}
        if self.env.gripper.closed:
            return {"type": "error", "msg": "gripper is closed; stop or reset"}
        try:
            d = [float(msg.get(k, 0.0)) for k in ("dx", "dy", "dz")]
            r = [float(msg.get(k, 0.0)) for k in ("drx", "dry", "drz")]
        except (TypeError, ValueError):
            return {"type": "error", "msg": "move fields must be numbers"}
        d = np.clip(d, -MAX_STEP_M, MAX_STEP_M)
        r = np.clip(r, -MAX_STEP_DEG, MAX_STEP_DEG)
        rot = RigidTransform.identity()
        for axis, deg in zip(((1, 0, 0), (0, 1, 0), (0, 0, 1)), r):
            if deg:
                step = RigidTransform.from_axis_angle(axis, math.radians(float(deg)))
                rot = RigidTransform(step.rotation @ rot.rotation, np.zeros(3))
        action = RigidTransform(rot.rotation, d)
        self.env.apply(action)
        self._record(button=0)
        return self._frame_message()

    def close(self) -> dict:
        if not self.recording or self.env is None:
            return {"type": "error", "msg": "no active episode"}
        if self.env.gripper.closed:
            return {"type": "error", "msg": "gripper already closed"}
        self._record(button=1)
        outcome = self.env.close_and_lift()
        self._record(button=1)
        if self.writer is not None:
            self.writer.set_outcome(outcome.success, outcome.failure_reason, outcome.object_uid)
        return {"type": "outcome", "success": outcome.success,
                "reason": outcome.failure_reason}

    # -- helpers ----------------------------------------------------------------

    def _record(self, button: int):
        color, depth, _ = self.env.render()
        self._last_color = color
        if self.writer is not None:
            self.writer.add_frame(color, depth, self.env.camera_pose(), button,
                                  timestamp=self.seq / 15.0)
        self.seq += 1

    def _frame_message(self) -> dict:
        buf = io.BytesIO()
        Image.fromarray(self._last_color).save(buf, format="PNG")
        g = self.env.gripper
        return {
            "type": "frame",
            "seq": self.seq,
            "pose": g.pose.matrix().reshape(-1).tolist(),
            "gripper_state": {"opening": g.opening, "closed": g.closed},
            "png_b64": base64.b64encode(buf.getvalue()).decode(),
        }

    def handle(self, msg: dict) -> list:
        """Returns the reply messages for one client message."""
        kind = msg.get("type")
        if kind == "start":
            reply = self.start()
            if reply.get("type") == "started":
                return [reply, self._frame_message()]
            return [reply]
        if kind == "reset":
            return [self.reset()]
        if kind == "stop":
            return [self.stop()]
        if kind == "move":
            return [self.move(msg)]
        if kind == "close":
            reply = self.close()
            if reply.get("type") == "outcome":
                return [self._frame_message(), reply]
            return [reply]
        return [{"type": "error", "msg": f"unknown message type {kind!r}"}]


def build_app(profile: Profile, config: str, out_root, seed: int = 0) -> FastAPI:
    app = FastAPI(title="avgrasp teleop")
    out_root = Path(out_root)
    counter = {"sessions": 0}

    @app.get("/healthz")
    def health():
        return {"ok": True, "schema": SCHEMA}

    @app.websocket("/session")
    async def session(ws: WebSocket):
        await ws.accept()
        counter["sessions"] += 1
        sess = TeleopSession(profile, config, out_root,
                             seed=seed + 1000 * counter["sessions"])
        await ws.send_text(json.dumps(
            {"type": "hello", "schema": SCHEMA, "config": config, "seed": sess.seed}))
        last_sent = 0.0
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                    if not isinstance(msg, dict):
                        raise ValueError("not an object")
                except ValueError as e:
                    await ws.send_text(json.dumps({"type": "error", "msg": f"bad json: {e}"}))
                    continue
                replies = sess.handle(msg)
                for reply in replies:
                    if reply.get("type") == "frame":
                        now = time.monotonic()
                        wait = MIN_FRAME_INTERVAL - (now - last_sent)
                        if wait > 0:
                            import asyncio

                            await asyncio.sleep(wait)
                        last_sent = time.monotonic()
                    await ws.send_text(json.dumps(reply))
        except WebSocketDisconnect:
            sess.flush_incomplete()

    return app


def serve(host: str, port: int, profile: Profile, config: str, out_root, seed: int = 0):
    import uvicorn

    app = build_app(profile, config, out_root, seed=seed)
    log.info("teleop service on ws://%s:%d/session (archives -> %s)", host, port, out_root)
    uvicorn.run(app, host=host, port=port, log_level="warning")
