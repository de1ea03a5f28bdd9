"""Analytic wrist-camera rendering of primitive scenes.

Per pixel the nearest ray intersection against all primitives (objects,
support geometry, gripper body) is computed in closed form. Support
surfaces carry a deterministic procedural texture so that image-feature
tracking has something to latch onto; shading is a simple headlight
lambert term. Depth is exact unless gaussian sensor noise is requested.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from ..geometry import CameraIntrinsics, RigidTransform
from .world import SHAPE_BOX, SHAPE_CYLINDER, SHAPE_SPHERE


def pack_primitives(prims) -> tuple:
    n = len(prims)
    types = np.zeros(n, dtype=np.int32)
    params = np.zeros((n, 3), dtype=np.float64)
    rots = np.zeros((n, 3, 3), dtype=np.float64)
    trans = np.zeros((n, 3), dtype=np.float64)
    colors = np.zeros((n, 3), dtype=np.float32)
    textured = np.zeros(n, dtype=np.uint8)
    for i, p in enumerate(prims):
        types[i] = p.shape
        params[i, : len(p.size)] = p.size
        rots[i] = p.pose.rotation
        trans[i] = p.pose.translation
        colors[i] = p.color
        textured[i] = 1 if p.uid < 0 else 0
    return types, params, rots, trans, colors, textured


@njit(cache=True, fastmath=True, inline="always")
def _intersect_local(shape, p0, p1, p2, ox, oy, oz, dx, dy, dz):
    """Nearest positive hit in the primitive's local frame.

    Returns (t, nx, ny, nz); t < 0 means miss. Normals are local.
    """
    eps = 1e-9
    if shape == SHAPE_SPHERE:
        b = ox * dx + oy * dy + oz * dz
        c = ox * ox + oy * oy + oz * oz - p0 * p0
        disc = b * b - c
        if disc < 0.0:
            return -1.0, 0.0, 0.0, 0.0
        t = -b - np.sqrt(disc)
        if t < eps:
            return -1.0, 0.0, 0.0, 0.0
        hx = ox + t * dx
        hy = oy + t * dy
        hz = oz + t * dz
        return t, hx / p0, hy / p0, hz / p0
    if shape == SHAPE_BOX:
        tmin = -1e30
        tmax = 1e30
        nx = ny = nz = 0.0
        for a in range(3):
            h = p0 if a == 0 else (p1 if a == 1 else p2)
            o = ox if a == 0 else (oy if a == 1 else oz)
            d = dx if a == 0 else (dy if a == 1 else dz)
            if abs(d) < 1e-12:
                if o < -h or o > h:
                    return -1.0, 0.0, 0.0, 0.0
            else:
                t1 = (-h - o) / d
                t2 = (h - o) / d
                sign = -1.0
                if t1 > t2:
                    t1, t2 = t2, t1
                    sign = 1.0
                if t1 > tmin:
                    tmin = t1
                    nx = ny = nz = 0.0
                    if a == 0:
                        nx = sign
                    elif a == 1:
                        ny = sign
                    else:
                        nz = sign
                if t2 < tmax:
                    tmax = t2
        if tmin > tmax or tmin < eps:
            return -1.0, 0.0, 0.0, 0.0
        return tmin, nx, ny, nz
    # finite capped cylinder, axis = local z
    r = p0
    hh = p1
    best = 1e30
    bnx = bny = bnz = 0.0
    a2 = dx * dx + dy * dy
    if a2 > 1e-14:
        b = ox * dx + oy * dy
        c = ox * ox + oy * oy - r * r
        disc = b * b - a2 * c
        if disc >= 0.0:
            t = (-b - np.sqrt(disc)) / a2
            z = oz + t * dz
            if t > eps and -hh <= z <= hh:
                best = t
                bnx = (ox + t * dx) / r
                bny = (oy + t * dy) / r
                bnz = 0.0
    if abs(dz) > 1e-12:
        for cap in range(2):
            zc = hh if cap == 0 else -hh
            t = (zc - oz) / dz
            if eps < t < best:
                hx = ox + t * dx
                hy = oy + t * dy
                if hx * hx + hy * hy <= r * r:
                    best = t
                    bnx = bny = 0.0
                    bnz = 1.0 if cap == 0 else -1.0
    if best >= 1e29:
        return -1.0, 0.0, 0.0, 0.0
    return best, bnx, bny, bnz


@njit(cache=True, fastmath=True, inline="always")
def _texture(px, py, pz):
    # smooth surface-attached bands; wavelengths of a few cm so that image
    # patches stay correlated across small camera motions
    checker = (int(np.floor(px / 0.04)) + int(np.floor(py / 0.04)) + int(np.floor(pz / 0.04))) & 1
    s = (
        np.sin(px * 97.0 + py * 31.0)
        + np.sin(py * 71.0 - pz * 53.0 + 1.7)
        + np.sin((px + py + pz) * 149.0)
    ) / 3.0
    return (0.86 if checker == 0 else 1.10) * (0.9 + 0.18 * s)


@njit(cache=True, fastmath=True, parallel=True)
def _render_kernel(types, params, rots, trans, colors, textured,
                   r_cw, t_cw, fx, fy, cx, cy, h, w,
                   depth_out, color_out, index_out):
    n = types.shape[0]
    for v in prange(h):
        for u in range(w):
            ddx = (u - cx) / fx
            ddy = (v - cy) / fy
            wx = r_cw[0, 0] * ddx + r_cw[0, 1] * ddy + r_cw[0, 2]
            wy = r_cw[1, 0] * ddx + r_cw[1, 1] * ddy + r_cw[1, 2]
            wz = r_cw[2, 0] * ddx + r_cw[2, 1] * ddy + r_cw[2, 2]
            norm = np.sqrt(wx * wx + wy * wy + wz * wz)
            wx /= norm
            wy /= norm
            wz /= norm
            depth_scale = r_cw[0, 2] * wx + r_cw[1, 2] * wy + r_cw[2, 2] * wz
            best_t = 1e30
            best_i = -1
            bnx = bny = bnz = 0.0
            for i in range(n):
                # ray into the primitive's local frame
                ox = t_cw[0] - trans[i, 0]
                oy = t_cw[1] - trans[i, 1]
                oz = t_cw[2] - trans[i, 2]
                lox = rots[i, 0, 0] * ox + rots[i, 1, 0] * oy + rots[i, 2, 0] * oz
                loy = rots[i, 0, 1] * ox + rots[i, 1, 1] * oy + rots[i, 2, 1] * oz
                loz = rots[i, 0, 2] * ox + rots[i, 1, 2] * oy + rots[i, 2, 2] * oz
                ldx = rots[i, 0, 0] * wx + rots[i, 1, 0] * wy + rots[i, 2, 0] * wz
                ldy = rots[i, 0, 1] * wx + rots[i, 1, 1] * wy + rots[i, 2, 1] * wz
                ldz = rots[i, 0, 2] * wx + rots[i, 1, 2] * wy + rots[i, 2, 2] * wz
                t, nx, ny, nz = _intersect_local(
                    types[i], params[i, 0], params[i, 1], params[i, 2],
                    lox, loy, loz, ldx, ldy, ldz,
                )
                if t > 0.0 and t < best_t:
                    best_t = t
                    best_i = i
                    bnx, bny, bnz = nx, ny, nz
            if best_i < 0:
                depth_out[v, u] = 0.0
                index_out[v, u] = -1
                continue
            depth_out[v, u] = best_t * depth_scale
            index_out[v, u] = best_i
            # world normal for shading
            i = best_i
            nwx = rots[i, 0, 0] * bnx + rots[i, 0, 1] * bny + rots[i, 0, 2] * bnz
            nwy = rots[i, 1, 0] * bnx + rots[i, 1, 1] * bny + rots[i, 1, 2] * bnz
            nwz = rots[i, 2, 0] * bnx + rots[i, 2, 1] * bny + rots[i, 2, 2] * bnz
            lambert = abs(nwx * wx + nwy * wy + nwz * wz)
            shade = 0.35 + 0.65 * lambert
            if textured[i] == 1:
                px = t_cw[0] + best_t * wx
                py = t_cw[1] + best_t * wy
                pz = t_cw[2] + best_t * wz
                shade *= _texture(px, py, pz)
            for c in range(3):
                val = colors[i, c] * shade
                if val > 255.0:
                    val = 255.0
                color_out[v, u, c] = np.uint8(val)


def render_packed(packed, k: CameraIntrinsics, cam_pose: RigidTransform):
    """Render pre-packed primitives; returns (color, depth, hit_index)."""
    types, params, rots, trans, colors, textured = packed
    h, w = k.height, k.width
    depth = np.zeros((h, w), dtype=np.float32)
    color = np.zeros((h, w, 3), dtype=np.uint8)
    index = np.full((h, w), -1, dtype=np.int32)
    _render_kernel(
        types, params, rots, trans, colors, textured,
        np.ascontiguousarray(cam_pose.rotation), np.ascontiguousarray(cam_pose.translation),
        k.fx, k.fy, k.cx, k.cy, h, w, depth, color, index,
    )
    return color, depth, index


def render_scene(scene, gripper_boxes, k: CameraIntrinsics, cam_pose: RigidTransform,
                 noise_sigma: float = 0.0, rng=None):
    """Render scene + support + gripper. Returns (color, depth, gripper_mask).

    Depth is exact analytic range along the optical axis; optional zero-mean
    gaussian noise is added to valid pixels only.
    """
    prims = scene.all_primitives() + list(gripper_boxes)
    packed = pack_primitives(prims)
    color, depth, index = render_packed(packed, k, cam_pose)
    n_scene = len(scene.all_primitives())
    gripper_mask = index >= n_scene
    if noise_sigma > 0.0:
        if rng is None:
            rng = np.random.default_rng()
        noise = rng.normal(0.0, noise_sigma, size=depth.shape).astype(np.float32)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-4), 0.0)
    return color, depth, gripper_mask
