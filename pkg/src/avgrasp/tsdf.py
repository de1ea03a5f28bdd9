"""Truncated signed distance fusion and raycast rendering of virtual views.

The volume is a dense grid over the workspace. Values live in [-1, 1]
(signed distance normalized by the truncation band), weight 0 marks
never-observed voxels, and surface color is stored per voxel to support
ray casting. Integration blends new observations with an exponential
moving average biased toward the newest frame, so the map tracks moving
objects instead of averaging them away.

The inner loops are numba kernels; everything else is plain numpy.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np
from numba import njit, prange

from .config import VolumeConfig
from .geometry import CameraIntrinsics, RigidTransform, invert

EMA_ALPHA = 0.8  # weight of the newest observation

_MAGIC = b"TSDF"
_FORMAT_VERSION = 1


@dataclasses.dataclass
class RenderedView:
    """A virtual wrist-camera observation raycast from the volume."""

    color: np.ndarray    # (H, W, 3) uint8
    depth: np.ndarray    # (H, W) float32 meters, 0 invalid
    normals: np.ndarray  # (H, W, 3) float32 unit, camera frame, 0 invalid
    pose: RigidTransform  # camera-to-world
    intrinsics: CameraIntrinsics


@njit(cache=True, fastmath=True, parallel=True)
def _integrate_kernel(tsdf, weight, color, origin, voxel, trunc, max_weight,
                      r_wc, t_wc, fx, fy, cx, cy, depth, rgb):
    nx, ny, nz = tsdf.shape
    h, w = depth.shape
    alpha = EMA_ALPHA
    for ix in prange(nx):
        px = origin[0] + (ix + 0.5) * voxel
        for iy in range(ny):
            py = origin[1] + (iy + 0.5) * voxel
            # camera-frame coords of (px, py, pz) split into a z-independent part
            bx = r_wc[0, 0] * px + r_wc[0, 1] * py + t_wc[0]
            by = r_wc[1, 0] * px + r_wc[1, 1] * py + t_wc[1]
            bz = r_wc[2, 0] * px + r_wc[2, 1] * py + t_wc[2]
            for iz in range(nz):
                pz = origin[2] + (iz + 0.5) * voxel
                zc = bz + r_wc[2, 2] * pz
                if zc <= 1e-6:
                    continue
                xc = bx + r_wc[0, 2] * pz
                yc = by + r_wc[1, 2] * pz
                u = int(round(fx * xc / zc + cx))
                v = int(round(fy * yc / zc + cy))
                if u < 0 or u >= w or v < 0 or v >= h:
                    continue
                d_obs = depth[v, u]
                if d_obs <= 0.0:
                    continue
                sd = d_obs - zc
                if sd < -trunc:
                    continue
                obs = sd / trunc
                if obs > 1.0:
                    obs = 1.0
                elif obs < -1.0:
                    obs = -1.0
                if weight[ix, iy, iz] == 0:
                    tsdf[ix, iy, iz] = obs
                    color[ix, iy, iz, 0] = rgb[v, u, 0]
                    color[ix, iy, iz, 1] = rgb[v, u, 1]
                    color[ix, iy, iz, 2] = rgb[v, u, 2]
                else:
                    tsdf[ix, iy, iz] = alpha * obs + (1.0 - alpha) * tsdf[ix, iy, iz]
                    for c in range(3):
                        color[ix, iy, iz, c] = alpha * rgb[v, u, c] + (1.0 - alpha) * color[ix, iy, iz, c]
                if weight[ix, iy, iz] < max_weight:
                    weight[ix, iy, iz] += 1


@njit(cache=True, fastmath=True, inline="always")
def _trilinear(tsdf, weight, gx, gy, gz):
    """Interpolated (value, trusted) at grid-center coordinates."""
    i = int(np.floor(gx))
    j = int(np.floor(gy))
    k = int(np.floor(gz))
    nx, ny, nz = tsdf.shape
    if i < 0 or j < 0 or k < 0 or i + 1 >= nx or j + 1 >= ny or k + 1 >= nz:
        return 1.0, False
    fx = gx - i
    fy = gy - j
    fz = gz - k
    trusted = True
    val = 0.0
    for di in range(2):
        wi = fx if di == 1 else 1.0 - fx
        for dj in range(2):
            wj = fy if dj == 1 else 1.0 - fy
            for dk in range(2):
                wk = fz if dk == 1 else 1.0 - fz
                if weight[i + di, j + dj, k + dk] == 0:
                    trusted = False
                val += wi * wj * wk * tsdf[i + di, j + dj, k + dk]
    return val, trusted


@njit(cache=True, fastmath=True, inline="always")
def _trilinear_color(color, gx, gy, gz, out):
    i = int(np.floor(gx))
    j = int(np.floor(gy))
    k = int(np.floor(gz))
    fx = gx - i
    fy = gy - j
    fz = gz - k
    for c in range(3):
        out[c] = 0.0
    for di in range(2):
        wi = fx if di == 1 else 1.0 - fx
        for dj in range(2):
            wj = fy if dj == 1 else 1.0 - fy
            for dk in range(2):
                wk = fz if dk == 1 else 1.0 - fz
                www = wi * wj * wk
                for c in range(3):
                    out[c] += www * color[i + di, j + dj, k + dk, c]


@njit(cache=True, fastmath=True, parallel=True)
def _raycast_kernel(tsdf, weight, color, origin, voxel, trunc,
                    r_cw, t_cw, fx, fy, cx, cy, h, w,
                    depth_out, color_out, normal_out):
    nx, ny, nz = tsdf.shape
    base = 0.5 * voxel
    # volume AABB in world coordinates, shrunk half a voxel for interpolation
    lo0 = origin[0] + 0.5 * voxel
    lo1 = origin[1] + 0.5 * voxel
    lo2 = origin[2] + 0.5 * voxel
    hi0 = origin[0] + (nx - 0.5) * voxel
    hi1 = origin[1] + (ny - 0.5) * voxel
    hi2 = origin[2] + (nz - 0.5) * voxel
    inv_voxel = 1.0 / voxel
    for v in prange(h):
        rgb = np.empty(3, dtype=np.float32)
        for u in range(w):
            # ray in world coordinates
            dx = (u - cx) / fx
            dy = (v - cy) / fy
            wx = r_cw[0, 0] * dx + r_cw[0, 1] * dy + r_cw[0, 2]
            wy = r_cw[1, 0] * dx + r_cw[1, 1] * dy + r_cw[1, 2]
            wz = r_cw[2, 0] * dx + r_cw[2, 1] * dy + r_cw[2, 2]
            norm = np.sqrt(wx * wx + wy * wy + wz * wz)
            wx /= norm
            wy /= norm
            wz /= norm
            # depth along the optical axis per unit ray length
            depth_scale = r_cw[0, 2] * wx + r_cw[1, 2] * wy + r_cw[2, 2] * wz
            # slab intersection with the volume box
            t0 = 1e-4
            t1 = 1e30
            ok = True
            for a in range(3):
                o = t_cw[a]
                d = wx if a == 0 else (wy if a == 1 else wz)
                lo = lo0 if a == 0 else (lo1 if a == 1 else lo2)
                hi = hi0 if a == 0 else (hi1 if a == 1 else hi2)
                if abs(d) < 1e-12:
                    if o < lo or o > hi:
                        ok = False
                        break
                else:
                    ta = (lo - o) / d
                    tb = (hi - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
            if not ok or t0 >= t1:
                depth_out[v, u] = 0.0
                continue

            t = t0
            gx = (t_cw[0] + t * wx - origin[0]) * inv_voxel - 0.5
            gy = (t_cw[1] + t * wy - origin[1]) * inv_voxel - 0.5
            gz = (t_cw[2] + t * wz - origin[2]) * inv_voxel - 0.5
            prev_val, prev_trust = _trilinear(tsdf, weight, gx, gy, gz)
            prev_t = t
            hit = False
            hit_t = 0.0
            while t < t1:
                # adaptive step: sprint through far/unknown space, creep near zero
                if not prev_trust or prev_val >= 0.999:
                    dt = trunc * 0.75
                elif prev_val > 0.3:
                    dt = prev_val * trunc * 0.6
                    if dt < base:
                        dt = base
                else:
                    dt = base
                t = prev_t + dt
                if t > t1:
                    break
                gx = (t_cw[0] + t * wx - origin[0]) * inv_voxel - 0.5
                gy = (t_cw[1] + t * wy - origin[1]) * inv_voxel - 0.5
                gz = (t_cw[2] + t * wz - origin[2]) * inv_voxel - 0.5
                val, trust = _trilinear(tsdf, weight, gx, gy, gz)
                if val <= 0.0:
                    if t - prev_t > 2.0 * base:
                        # flip found while sprinting: re-march the gap finely
                        ft = prev_t
                        fv = prev_val
                        fr = prev_trust
                        while ft < t:
                            nt = ft + base
                            ggx = (t_cw[0] + nt * wx - origin[0]) * inv_voxel - 0.5
                            ggy = (t_cw[1] + nt * wy - origin[1]) * inv_voxel - 0.5
                            ggz = (t_cw[2] + nt * wz - origin[2]) * inv_voxel - 0.5
                            nv, ntr = _trilinear(tsdf, weight, ggx, ggy, ggz)
                            if nv <= 0.0:
                                prev_t = ft
                                prev_val = fv
                                prev_trust = fr
                                t = nt
                                val = nv
                                trust = ntr
                                break
                            ft = nt
                            fv = nv
                            fr = ntr
                    if prev_val > 0.0 and trust and prev_trust:
                        # linear zero-crossing refinement
                        frac = prev_val / (prev_val - val)
                        hit_t = prev_t + frac * (t - prev_t)
                        hit = True
                    # crossings through unobserved voxels stay invalid
                    break
                prev_val = val
                prev_trust = trust
                prev_t = t
            if not hit:
                depth_out[v, u] = 0.0
                continue

            hx = t_cw[0] + hit_t * wx
            hy = t_cw[1] + hit_t * wy
            hz = t_cw[2] + hit_t * wz
            ggx = (hx - origin[0]) * inv_voxel - 0.5
            ggy = (hy - origin[1]) * inv_voxel - 0.5
            ggz = (hz - origin[2]) * inv_voxel - 0.5
            depth_out[v, u] = hit_t * depth_scale
            _trilinear_color(color, ggx, ggy, ggz, rgb)
            for c in range(3):
                x = rgb[c]
                if x < 0.0:
                    x = 0.0
                elif x > 255.0:
                    x = 255.0
                color_out[v, u, c] = np.uint8(x)
            # surface normal from the TSDF gradient (central differences)
            hstep = 0.5
            gpx, _ = _trilinear(tsdf, weight, ggx + hstep, ggy, ggz)
            gmx, _ = _trilinear(tsdf, weight, ggx - hstep, ggy, ggz)
            gpy, _ = _trilinear(tsdf, weight, ggx, ggy + hstep, ggz)
            gmy, _ = _trilinear(tsdf, weight, ggx, ggy - hstep, ggz)
            gpz, _ = _trilinear(tsdf, weight, ggx, ggy, ggz + hstep)
            gmz, _ = _trilinear(tsdf, weight, ggx, ggy, ggz - hstep)
            nxv = gpx - gmx
            nyv = gpy - gmy
            nzv = gpz - gmz
            nn = np.sqrt(nxv * nxv + nyv * nyv + nzv * nzv)
            if nn > 1e-12:
                normal_out[v, u, 0] = nxv / nn
                normal_out[v, u, 1] = nyv / nn
                normal_out[v, u, 2] = nzv / nn


class TsdfVolume:
    """Dense TSDF grid with EMA integration and raycast rendering."""

    def __init__(self, config: VolumeConfig | None = None):
        self.config = config or VolumeConfig()
        nx, ny, nz = self.config.dims
        self.origin = np.asarray(self.config.origin, dtype=np.float64)
        self.voxel_size = float(self.config.voxel_size)
        self.truncation = float(self.config.truncation)
        self.max_weight = int(self.config.max_weight)
        self.tsdf = np.ones((nx, ny, nz), dtype=np.float32)
        self.weight = np.zeros((nx, ny, nz), dtype=np.int32)
        self.color = np.zeros((nx, ny, nz, 3), dtype=np.float32)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.tsdf.shape

    def reset(self):
        self.tsdf.fill(1.0)
        self.weight.fill(0)
        self.color.fill(0.0)

    def integrate(self, color: np.ndarray, depth: np.ndarray, k: CameraIntrinsics,
                  cam_pose: RigidTransform) -> "TsdfVolume":
        """Fuse one posed RGB-D frame into the volume (in place)."""
        if not (np.all(np.isfinite(cam_pose.rotation)) and np.all(np.isfinite(cam_pose.translation))):
            raise ValueError("non-finite camera pose")
        if depth.shape != (k.height, k.width):
            raise ValueError("depth does not match intrinsics")
        w2c = invert(cam_pose)
        _integrate_kernel(
            self.tsdf, self.weight, self.color,
            self.origin, self.voxel_size, self.truncation, self.max_weight,
            np.ascontiguousarray(w2c.rotation), np.ascontiguousarray(w2c.translation),
            k.fx, k.fy, k.cx, k.cy,
            np.ascontiguousarray(depth, dtype=np.float32),
            np.ascontiguousarray(color, dtype=np.float32),
        )
        return self

    def raycast(self, k: CameraIntrinsics, cam_pose: RigidTransform) -> RenderedView:
        """Render a virtual view from an arbitrary camera pose."""
        h, w = k.height, k.width
        depth = np.zeros((h, w), dtype=np.float32)
        color = np.zeros((h, w, 3), dtype=np.uint8)
        normals_w = np.zeros((h, w, 3), dtype=np.float32)
        _raycast_kernel(
            self.tsdf, self.weight, self.color,
            self.origin, self.voxel_size, self.truncation,
            np.ascontiguousarray(cam_pose.rotation), np.ascontiguousarray(cam_pose.translation),
            k.fx, k.fy, k.cx, k.cy, h, w,
            depth, color, normals_w,
        )
        # gradient normals are world-frame; views carry camera-frame normals
        normals = normals_w @ cam_pose.rotation.astype(np.float32)
        return RenderedView(color=color, depth=depth, normals=normals, pose=cam_pose, intrinsics=k)

    def snapshot(self) -> "TsdfVolume":
        """An immutable consistent copy, safe for concurrent raycasting."""
        snap = TsdfVolume.__new__(TsdfVolume)
        snap.config = self.config
        snap.origin = self.origin.copy()
        snap.voxel_size = self.voxel_size
        snap.truncation = self.truncation
        snap.max_weight = self.max_weight
        snap.tsdf = self.tsdf.copy()
        snap.weight = self.weight.copy()
        snap.color = self.color.copy()
        for arr in (snap.tsdf, snap.weight, snap.color):
            arr.setflags(write=False)
        return snap

    def save(self, path):
        """Binary debug dump: LE header then tsdf/weight/rgb, x-fastest."""
        nx, ny, nz = self.dims
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", _FORMAT_VERSION))
            f.write(struct.pack("<iii", nx, ny, nz))
            f.write(struct.pack("<f", self.voxel_size))
            f.write(struct.pack("<fff", *self.origin.astype(np.float32)))
            f.write(self.tsdf.transpose(2, 1, 0).astype("<f4").tobytes())
            f.write(self.weight.transpose(2, 1, 0).astype("<i4").tobytes())
            f.write(self.color.transpose(2, 1, 0, 3).astype("<f4").tobytes())

    @staticmethod
    def load(path) -> "TsdfVolume":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _MAGIC:
                raise ValueError("not a TSDF dump")
            (version,) = struct.unpack("<I", f.read(4))
            if version != _FORMAT_VERSION:
                raise ValueError(f"unsupported TSDF dump version {version}")
            nx, ny, nz = struct.unpack("<iii", f.read(12))
            (voxel,) = struct.unpack("<f", f.read(4))
            origin = struct.unpack("<fff", f.read(12))
            n = nx * ny * nz
            tsdf = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(nz, ny, nx).transpose(2, 1, 0)
            weight = np.frombuffer(f.read(4 * n), dtype="<i4").reshape(nz, ny, nx).transpose(2, 1, 0)
            color = np.frombuffer(f.read(12 * n), dtype="<f4").reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
        extent = (nx * voxel, ny * voxel, nz * voxel)
        cfg = VolumeConfig(origin=tuple(float(o) for o in origin), extent=extent, voxel_size=float(voxel))
        vol = TsdfVolume(cfg)
        vol.tsdf = np.ascontiguousarray(tsdf, dtype=np.float32)
        vol.weight = np.ascontiguousarray(weight, dtype=np.int32)
        vol.color = np.ascontiguousarray(color, dtype=np.float32)
        return vol
