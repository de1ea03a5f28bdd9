"""Synthetic grasping world: primitive objects, supports, and scene sampling.

Scenes hold rigid primitives resting on one of four support layouts
(tabletop, bin, wall, random tilted bin). The world is quasi-static: no
dynamics, objects move only when the whole pile is perturbed or an object
is grasped away.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from ..geometry import RigidTransform, compose

SHAPE_SPHERE = 0
SHAPE_BOX = 1
SHAPE_CYLINDER = 2

_SHAPE_NAMES = {SHAPE_SPHERE: "sphere", SHAPE_BOX: "box", SHAPE_CYLINDER: "cylinder"}
_SHAPE_CODES = {v: k for k, v in _SHAPE_NAMES.items()}

SUPPORT_CONFIGS = ("tabletop", "bin", "wall", "random")


@dataclasses.dataclass
class Primitive:
    """A rigid shape. Sizes in meters; pose maps local -> world.

    size meaning: sphere (radius,); box (hx, hy, hz) half extents;
    cylinder (radius, half_height) with the local z axis as the cylinder axis.
    """

    shape: int
    size: tuple
    pose: RigidTransform
    color: tuple = (200, 80, 80)
    uid: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError("primitive sizes must be positive")

    @property
    def shape_name(self) -> str:
        return _SHAPE_NAMES[self.shape]

    def bounding_radius(self) -> float:
        if self.shape == SHAPE_SPHERE:
            return self.size[0]
        if self.shape == SHAPE_BOX:
            return float(np.linalg.norm(self.size))
        return math.hypot(self.size[0], self.size[1])

    def min_graspable_extent(self) -> float:
        """Smallest full cross-section a parallel-jaw gripper could close on."""
        if self.shape == SHAPE_SPHERE:
            return 2 * self.size[0]
        if self.shape == SHAPE_BOX:
            return 2 * min(self.size)
        return 2 * self.size[0]

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of world points to this primitive (vectorized)."""
        p = np.atleast_2d(points)
        local = (p - self.pose.translation) @ self.pose.rotation
        if self.shape == SHAPE_SPHERE:
            return np.linalg.norm(local, axis=1) - self.size[0]
        if self.shape == SHAPE_BOX:
            q = np.abs(local) - np.asarray(self.size)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            return outside + inside
        r, hh = self.size
        d = np.stack([np.hypot(local[:, 0], local[:, 1]) - r, np.abs(local[:, 2]) - hh], axis=1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(np.max(d, axis=1), 0.0)
        return outside + inside

    def surface_points(self, spacing: float = 0.004) -> np.ndarray:
        """Deterministic world-frame surface samples, roughly `spacing` apart."""
        return self.pose.apply(_canonical_surface(self.shape, self.size, spacing))

    def to_dict(self) -> dict:
        return {
            "shape": self.shape_name,
            "size": list(self.size),
            "pose": self.pose.matrix().reshape(-1).tolist(),
            "color": list(self.color),
            "uid": self.uid,
        }

    @staticmethod
    def from_dict(d: dict) -> "Primitive":
        return Primitive(
            shape=_SHAPE_CODES[d["shape"]],
            size=tuple(d["size"]),
            pose=RigidTransform.from_matrix(np.asarray(d["pose"]).reshape(4, 4)),
            color=tuple(d["color"]),
            uid=int(d.get("uid", 0)),
        )


def _canonical_surface(shape, size, spacing):
    if shape == SHAPE_SPHERE:
        r = size[0]
        n = max(64, int(4 * math.pi * r * r / (spacing * spacing)))
        i = np.arange(n, dtype=np.float64)
        golden = math.pi * (3 - math.sqrt(5))
        z = 1 - 2 * (i + 0.5) / n
        rho = np.sqrt(np.maximum(0.0, 1 - z * z))
        theta = golden * i
        return r * np.stack([rho * np.cos(theta), rho * np.sin(theta), z], axis=1)
    if shape == SHAPE_BOX:
        hx, hy, hz = size
        pts = []
        for axis, (a, b, c) in enumerate([(hy, hz, hx), (hx, hz, hy), (hx, hy, hz)]):
            na = max(2, int(2 * a / spacing) + 1)
            nb = max(2, int(2 * b / spacing) + 1)
            u, v = np.meshgrid(np.linspace(-a, a, na), np.linspace(-b, b, nb))
            u, v = u.ravel(), v.ravel()
            for sign in (-c, c):
                face = np.empty((u.size, 3))
                face[:, axis] = sign
                other = [i for i in range(3) if i != axis]
                face[:, other[0]] = u
                face[:, other[1]] = v
                pts.append(face)
        return np.concatenate(pts)
    r, hh = size
    n_th = max(12, int(2 * math.pi * r / spacing))
    n_z = max(2, int(2 * hh / spacing) + 1)
    th = np.linspace(0, 2 * math.pi, n_th, endpoint=False)
    zs = np.linspace(-hh, hh, n_z)
    tt, zz = np.meshgrid(th, zs)
    side = np.stack([r * np.cos(tt).ravel(), r * np.sin(tt).ravel(), zz.ravel()], axis=1)
    caps = []
    n_r = max(2, int(r / spacing) + 1)
    for rad in np.linspace(0, r, n_r)[1:]:
        m = max(8, int(2 * math.pi * rad / spacing))
        a = np.linspace(0, 2 * math.pi, m, endpoint=False)
        for sign in (-hh, hh):
            caps.append(np.stack([rad * np.cos(a), rad * np.sin(a), np.full(m, sign)], axis=1))
    return np.concatenate([side] + caps)


@dataclasses.dataclass
class Support:
    """Support geometry: a set of textured static boxes plus a rest frame."""

    kind: str
    boxes: list  # of Primitive (SHAPE_BOX), static
    frame: RigidTransform  # rest plane: origin on the surface, +z = support normal

    @property
    def normal(self) -> np.ndarray:
        return self.frame.rotation[:, 2]


@dataclasses.dataclass
class Scene:
    config: str
    objects: list
    support: Support
    workspace_lo: tuple
    workspace_hi: tuple
    seed: int
    bin_center: tuple = (0.0, 0.0)
    bin_half: float = 0.17

    def centroid(self) -> np.ndarray:
        if not self.objects:
            return np.asarray(self.support.frame.translation)
        return np.mean([o.pose.translation for o in self.objects], axis=0)

    def remove(self, uid: int):
        self.objects = [o for o in self.objects if o.uid != uid]

    def static_primitives(self) -> list:
        return self.support.boxes

    def all_primitives(self) -> list:
        return self.objects + self.support.boxes

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "workspace_lo": list(self.workspace_lo),
                "workspace_hi": list(self.workspace_hi),
                "seed": self.seed,
                "bin_center": list(self.bin_center),
                "bin_half": self.bin_half,
                "support_frame": self.support.frame.matrix().reshape(-1).tolist(),
                "support_kind": self.support.kind,
                "support_boxes": [b.to_dict() for b in self.support.boxes],
                "objects": [o.to_dict() for o in self.objects],
            },
            indent=1,
        )

    @staticmethod
    def from_json(text: str) -> "Scene":
        d = json.loads(text)
        support = Support(
            kind=d["support_kind"],
            boxes=[Primitive.from_dict(b) for b in d["support_boxes"]],
            frame=RigidTransform.from_matrix(np.asarray(d["support_frame"]).reshape(4, 4)),
        )
        return Scene(
            config=d["config"],
            objects=[Primitive.from_dict(o) for o in d["objects"]],
            support=support,
            workspace_lo=tuple(d["workspace_lo"]),
            workspace_hi=tuple(d["workspace_hi"]),
            seed=int(d["seed"]),
            bin_center=tuple(d.get("bin_center", (0.0, 0.0))),
            bin_half=float(d.get("bin_half", 0.17)),
        )


TABLE_COLOR = (130, 130, 135)
BIN_COLOR = (150, 120, 90)
WALL_COLOR = (160, 160, 150)

_PALETTE = [
    (200, 60, 60), (60, 160, 220), (240, 180, 40), (90, 190, 90),
    (190, 90, 200), (240, 120, 60), (70, 200, 180), (230, 80, 140),
]


def _table_box(half_xy=0.5) -> Primitive:
    return Primitive(SHAPE_BOX, (half_xy, half_xy, 0.02),
                     RigidTransform.translate(0, 0, -0.02), TABLE_COLOR, uid=-1)


def _bin_boxes_local(half, height) -> list:
    """Bin floor + four walls in the bin's rest frame (floor top at z=0)."""
    t = 0.012  # wall thickness
    return [
        Primitive(SHAPE_BOX, (half + t, half + t, 0.01), RigidTransform.translate(0, 0, -0.01), BIN_COLOR, uid=-2),
        Primitive(SHAPE_BOX, (t / 2, half + t, height / 2), RigidTransform.translate(half + t / 2, 0, height / 2), BIN_COLOR, uid=-3),
        Primitive(SHAPE_BOX, (t / 2, half + t, height / 2), RigidTransform.translate(-half - t / 2, 0, height / 2), BIN_COLOR, uid=-4),
        Primitive(SHAPE_BOX, (half + t, t / 2, height / 2), RigidTransform.translate(0, half + t / 2, height / 2), BIN_COLOR, uid=-5),
        Primitive(SHAPE_BOX, (half + t, t / 2, height / 2), RigidTransform.translate(0, -half - t / 2, height / 2), BIN_COLOR, uid=-6),
    ]


def _place_bin(frame: RigidTransform, half, height) -> list:
    return [
        Primitive(b.shape, b.size, compose(frame, b.pose), b.color, b.uid)
        for b in _bin_boxes_local(half, height)
    ]


def _sample_primitive(rng, uid) -> tuple:
    """(shape, size, rest_height, yaw-free local orientation)."""
    shape = int(rng.integers(0, 3))
    if shape == SHAPE_SPHERE:
        r = rng.uniform(0.018, 0.034)
        return shape, (float(r),), float(r), np.eye(3)
    if shape == SHAPE_BOX:
        hx = rng.uniform(0.013, 0.030)
        hy = rng.uniform(0.015, 0.050)
        hz = rng.uniform(0.016, 0.040)
        return shape, (float(hx), float(hy), float(hz)), float(hz), np.eye(3)
    r = rng.uniform(0.016, 0.028)
    hh = rng.uniform(0.024, 0.06)
    if rng.random() < 0.5:
        return SHAPE_CYLINDER, (float(r), float(hh)), float(hh), np.eye(3)
    # lying on its side: local z axis horizontal
    rot = RigidTransform.from_axis_angle([1, 0, 0], math.pi / 2).rotation
    return SHAPE_CYLINDER, (float(r), float(hh)), float(r), rot


def generate_scene(config: str, seed: int, n_objects: int | None = None,
                   workspace_lo=(-0.36, -0.36, 0.0), workspace_hi=(0.36, 0.36, 0.44)) -> Scene:
    """Sample a reproducible scene for one of the four support layouts."""
    if config not in SUPPORT_CONFIGS:
        raise ValueError(f"unknown scene config {config!r}; choose from {SUPPORT_CONFIGS}")
    rng = np.random.default_rng(seed)
    if n_objects is None:
        n_objects = int(rng.integers(1, 11))
    if not 0 <= n_objects <= 10:
        raise ValueError("n_objects must be in [0, 10]")

    bin_center = (0.0, 0.0)
    bin_half = 0.17
    in_bin = False
    if config == "tabletop":
        support = Support("tabletop", [_table_box()], RigidTransform.identity())
        lo2, hi2 = -0.20, 0.20
    elif config == "bin":
        support = Support("bin", [_table_box()] + _place_bin(RigidTransform.identity(), bin_half, 0.10),
                          RigidTransform.identity())
        lo2, hi2 = -bin_half + 0.02, bin_half - 0.02
        in_bin = True
    elif config == "wall":
        wall_x = 0.30
        wall = Primitive(SHAPE_BOX, (0.015, 0.45, 0.30), RigidTransform.translate(wall_x + 0.015, 0, 0.30),
                         WALL_COLOR, uid=-7)
        # rest frame on the wall face: +z_f = -x world (outward wall normal)
        rot = np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        frame = RigidTransform(rot, (wall_x, 0.0, 0.25))
        support = Support("wall", [_table_box(), wall], frame)
        lo2, hi2 = -0.18, 0.18
    else:  # random: raised, tilted bin
        height = rng.uniform(0.0, 0.15)
        tilt_deg = rng.uniform(0.0, 30.0)
        axis_az = rng.uniform(0, 2 * math.pi)
        axis = np.array([math.cos(axis_az), math.sin(axis_az), 0.0])
        cx, cy = rng.uniform(-0.06, 0.06, size=2)
        tilt = RigidTransform.from_axis_angle(axis, math.radians(tilt_deg), (0, 0, height))
        support_frame = compose(RigidTransform.translate(cx, cy, 0), tilt)
        support = Support("random", [_table_box()] + _place_bin(support_frame, bin_half, 0.10),
                          support_frame)
        bin_center = (float(cx), float(cy))
        lo2, hi2 = -bin_half + 0.02, bin_half - 0.02
        in_bin = True

    objects = []
    placed = []  # (xy in rest frame, bounding radius)
    attempts = 0
    uid = 0
    while len(objects) < n_objects:
        attempts += 1
        if attempts > 1000:
            raise RuntimeError("scene placement failed after 1000 rejections")
        shape, size, rest_h, local_rot = _sample_primitive(rng, uid)
        x = rng.uniform(lo2, hi2)
        y = rng.uniform(lo2, hi2)
        yaw = rng.uniform(0, 2 * math.pi)
        prim = Primitive(shape, size, RigidTransform.identity(), _PALETTE[uid % len(_PALETTE)], uid)
        rad = prim.bounding_radius()
        if in_bin and (abs(x) + rad > bin_half - 0.006 or abs(y) + rad > bin_half - 0.006):
            continue
        if any(math.hypot(x - px, y - py) < rad + pr + 0.002 for (px, py), pr in placed):
            continue
        yaw_rot = RigidTransform.from_axis_angle([0, 0, 1], yaw).rotation
        y_span = 0.8 if config == "wall" else 1.0
        local = RigidTransform(yaw_rot @ local_rot, (x, y * y_span, rest_h))
        pose = compose(support.frame, local)
        prim = Primitive(shape, size, pose, prim.color, uid)
        objects.append(prim)
        placed.append(((x, y * y_span), rad))
        uid += 1

    return Scene(config=config, objects=objects, support=support,
                 workspace_lo=tuple(workspace_lo), workspace_hi=tuple(workspace_hi),
                 seed=seed, bin_center=bin_center, bin_half=bin_half)


def perturb_scene(scene: Scene, rng) -> Scene:
    """Move the whole pile rigidly, as if dragged on a sheet.

    Translation norm in [0.10, 0.20] m within the support plane, rotation
    in [25, 40] degrees about the support normal through the pile centroid.
    Object-to-object poses are preserved exactly.
    """
    if not scene.objects:
        return scene
    normal = scene.support.normal
    centroid = scene.centroid()
    for _ in range(200):
        angle = math.radians(rng.uniform(25.0, 40.0)) * (1 if rng.random() < 0.5 else -1)
        mag = rng.uniform(0.10, 0.20)
        az = rng.uniform(0, 2 * math.pi)
        # translation within the support plane
        u = scene.support.frame.rotation[:, 0]
        v = scene.support.frame.rotation[:, 1]
        delta = mag * (math.cos(az) * u + math.sin(az) * v)
        rot = RigidTransform.from_axis_angle(normal, angle)
        move = compose(
            RigidTransform.translate(*(centroid + delta)),
            compose(rot, RigidTransform.translate(*(-centroid))),
        )
        new_objects = [
            Primitive(o.shape, o.size, compose(move, o.pose), o.color, o.uid) for o in scene.objects
        ]
        lo = np.asarray(scene.workspace_lo) + 0.02
        hi = np.asarray(scene.workspace_hi) - 0.02
        centers = np.stack([o.pose.translation for o in new_objects])
        if np.all(centers[:, :2] >= lo[:2]) and np.all(centers[:, :2] <= hi[:2]):
            scene.objects = new_objects
            return scene
    return scene  # keep the pile if no valid move was found
