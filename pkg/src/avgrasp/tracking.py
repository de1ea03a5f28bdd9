"""Frame-to-frame RGB-D pose estimation.

Pipeline: corner keypoints + normalized-intensity patch descriptors with
mutual-best/ratio matching, a RANSAC rigid fit closed by orthogonal
Procrustes, then projective point-to-plane ICP refinement. Gripper pixels
are masked out of both stages. The scene is assumed static.

The descriptor stage is deliberately lightweight (the pluggable
`correspondences` argument of track_pair accepts any provider with the
same contract, e.g. a SIFT wrapper).
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import ndimage

from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    compose,
    estimate_normals,
    unproject,
)


class TrackingError(Exception):
    pass


class InsufficientFeatures(TrackingError):
    pass


class DegenerateGeometry(TrackingError):
    pass


@dataclasses.dataclass
class Correspondence:
    p_a: np.ndarray  # 3D point, camera frame of image A
    p_b: np.ndarray  # matched point, camera frame of image B
    distance: float  # descriptor distance


@dataclasses.dataclass
class TrackingResult:
    relative_pose: RigidTransform  # camera B expressed in camera A coordinates
    inlier_count: int
    icp_rmse: float
    converged: bool


def _gray(color: np.ndarray) -> np.ndarray:
    return color.astype(np.float32) @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


def detect_corners(gray: np.ndarray, mask=None, max_corners=400, quality=0.01,
                   border=6) -> np.ndarray:
    """Harris corners as an (N, 2) array of (row, col), strongest first."""
    ix = ndimage.sobel(gray, axis=1, mode="nearest")
    iy = ndimage.sobel(gray, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, 1.5)
    syy = ndimage.gaussian_filter(iy * iy, 1.5)
    sxy = ndimage.gaussian_filter(ix * iy, 1.5)
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    r = det - 0.06 * trace * trace
    r[:border] = r[-border:] = 0
    r[:, :border] = r[:, -border:] = 0
    if mask is not None:
        r[mask] = 0
    peak = ndimage.maximum_filter(r, size=5)
    rmax = float(r.max())
    if rmax <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    cand = (r == peak) & (r > quality * rmax)
    ys, xs = np.nonzero(cand)
    order = np.argsort(r[ys, xs])[::-1][:max_corners]
    return np.stack([ys[order], xs[order]], axis=1)


def describe(gray: np.ndarray, corners: np.ndarray, patch: int = 13):
    """Normalized intensity patches; drops corners too close to the edge."""
    half = patch // 2
    h, w = gray.shape
    keep = []
    descs = []
    for row, col in corners:
        if row < half or col < half or row >= h - half or col >= w - half:
            continue
        p = gray[row - half:row + half + 1, col - half:col + half + 1].astype(np.float64)
        p = p - p.mean()
        n = np.linalg.norm(p)
        if n < 1e-6:
            continue
        descs.append((p / n).ravel())
        keep.append((row, col))
    if not keep:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, patch * patch))
    return np.asarray(keep, dtype=np.int64), np.stack(descs)


def match_descriptors(da: np.ndarray, db: np.ndarray, ratio: float = 0.92):
    """Mutual-best matches passing the second-best ratio test."""
    if len(da) == 0 or len(db) == 0:
        return []
    # normalized patches: distance ordering == negative correlation ordering
    sim = da @ db.T
    d2 = np.maximum(2.0 - 2.0 * sim, 0.0)
    best_b = np.argmin(d2, axis=1)
    best_a = np.argmin(d2, axis=0)
    out = []
    for ia, ib in enumerate(best_b):
        if best_a[ib] != ia:
            continue
        row = d2[ia]
        d_first = row[ib]
        row_sorted = np.partition(row, 1)[:2] if row.size > 1 else [d_first, np.inf]
        d_second = row_sorted[1] if row_sorted[0] == d_first else row_sorted[0]
        if row.size > 1 and d_first > (ratio ** 2) * d_second:
            continue
        out.append((ia, ib, math.sqrt(max(d_first, 0.0))))
    return out


def detect_and_match(frame_a, frame_b, k: CameraIntrinsics, mask=None,
                     min_matches: int = 3) -> list:
    """Corner matches lifted to 3D. frames are (color, depth) tuples."""
    color_a, depth_a = frame_a
    color_b, depth_b = frame_b
    ga, gb = _gray(color_a), _gray(color_b)
    ca, da = describe(ga, detect_corners(ga, mask))
    cb, db = describe(gb, detect_corners(gb, mask))
    pts_a, valid_a = unproject(depth_a, k)
    pts_b, valid_b = unproject(depth_b, k)
    corrs = []
    for ia, ib, dist in match_descriptors(da, db):
        ra, cca = ca[ia]
        rb, ccb = cb[ib]
        if not (valid_a[ra, cca] and valid_b[rb, ccb]):
            continue
        corrs.append(Correspondence(pts_a[ra, cca].astype(np.float64),
                                    pts_b[rb, ccb].astype(np.float64), dist))
    if len(corrs) < min_matches:
        raise InsufficientFeatures(f"only {len(corrs)} correspondences")
    return corrs


def fit_rigid(pa: np.ndarray, pb: np.ndarray) -> RigidTransform:
    """Least-squares rigid motion T with T(pb) ~= pa (orthogonal Procrustes)."""
    ca = pa.mean(axis=0)
    cb = pb.mean(axis=0)
    h = (pb - cb).T @ (pa - ca)
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-10 * max(s[0], 1e-30):
        raise DegenerateGeometry("correspondences are (nearly) collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, ca - r @ cb)


def estimate_rigid_ransac(corrs, iterations: int = 500, threshold: float = 0.01,
                          seed: int = 0, min_inliers: int = 3):
    """RANSAC over 3-point samples; returns (pose, inlier index array)."""
    if len(corrs) < 3:
        raise InsufficientFeatures("need at least 3 correspondences")
    pa = np.stack([c.p_a for c in corrs])
    pb = np.stack([c.p_b for c in corrs])
    rng = np.random.default_rng(seed)
    n = len(corrs)
    best_inliers = None
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        try:
            t = fit_rigid(pa[idx], pb[idx])
        except DegenerateGeometry:
            continue
        err = np.linalg.norm(pb @ t.rotation.T + t.translation - pa, axis=1)
        inliers = np.nonzero(err < threshold)[0]
        if best_inliers is None or len(inliers) > len(best_inliers):
            best_inliers = inliers
    if best_inliers is None or len(best_inliers) < min_inliers:
        raise DegenerateGeometry("no rigid model with enough inliers")
    pose = fit_rigid(pa[best_inliers], pb[best_inliers])
    return pose, best_inliers


def refine_icp(depth_a, depth_b, k: CameraIntrinsics, init: RigidTransform,
               mask=None, max_iterations: int = 30, tol: float = 1e-5,
               max_dist: float = 0.05, min_points: int = 100) -> TrackingResult:
    """Projective point-to-plane ICP refinement of a relative pose."""
    pts_a, valid_a = unproject(depth_a, k)
    normals_a = estimate_normals(depth_a, k)
    n_valid = np.linalg.norm(normals_a, axis=-1) > 0.5
    pts_b, valid_b = unproject(depth_b, k)
    if mask is not None:
        valid_a = valid_a & ~mask
        valid_b = valid_b & ~mask
    src = pts_b[valid_b].astype(np.float64)
    if len(src) > 6000:
        src = src[:: len(src) // 6000 + 1]

    pose = init
    rmse = float("inf")
    converged = False
    for iteration in range(max_iterations):
        moved = src @ pose.rotation.T + pose.translation
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.round(k.fx * moved[:, 0] / moved[:, 2] + k.cx).astype(int)
            v = np.round(k.fy * moved[:, 1] / moved[:, 2] + k.cy).astype(int)
        ok = (moved[:, 2] > 1e-6) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
        uu, vv = u[ok], v[ok]
        good = valid_a[vv, uu] & n_valid[vv, uu]
        p_src = moved[ok][good]
        p_tgt = pts_a[vv[good], uu[good]].astype(np.float64)
        nrm = normals_a[vv[good], uu[good]].astype(np.float64)
        dist = np.linalg.norm(p_src - p_tgt, axis=1)
        near = dist < max_dist
        p_src, p_tgt, nrm = p_src[near], p_tgt[near], nrm[near]
        if len(p_src) < min_points:
            return TrackingResult(init, 0, float("inf"), False)
        resid = np.sum((p_src - p_tgt) * nrm, axis=1)
        if iteration >= 10:
            # polish phase: drop depth-discontinuity outliers. Trimming from
            # the start would erase the sparse off-plane points that pin the
            # in-plane motion against a dominant support plane.
            mad = np.median(np.abs(resid - np.median(resid)))
            keep = np.abs(resid - np.median(resid)) < max(6 * 1.4826 * mad, 0.003)
            if keep.sum() >= min_points:
                p_src, p_tgt, nrm, resid = p_src[keep], p_tgt[keep], nrm[keep], resid[keep]
        rmse = float(np.sqrt(np.mean(resid**2)))
        a_rot = np.cross(p_src, nrm)
        a = np.concatenate([a_rot, nrm], axis=1)
        ata = a.T @ a
        atb = a.T @ (-resid)
        try:
            x = np.linalg.solve(ata + 1e-12 * np.eye(6), atb)
        except np.linalg.LinAlgError:
            return TrackingResult(init, 0, rmse, False)
        axis = x[:3]
        angle = np.linalg.norm(axis)
        delta = RigidTransform.from_axis_angle(axis if angle > 0 else [1, 0, 0], angle, x[3:6])
        pose = compose(delta, pose)
        converged = True
        if np.linalg.norm(x) < tol:
            break
    return TrackingResult(pose, len(p_src), rmse, converged)


def track_pair(frame_a, frame_b, k: CameraIntrinsics, mask=None, seed: int = 0,
               correspondences=None) -> TrackingResult:
    """Full relative-pose estimate between two RGB-D frames (B in A coords)."""
    corrs = correspondences if correspondences is not None else detect_and_match(
        frame_a, frame_b, k, mask
    )
    coarse, inliers = estimate_rigid_ransac(corrs, seed=seed)
    result = refine_icp(frame_a[1], frame_b[1], k, coarse, mask=mask)
    if not result.converged:
        return TrackingResult(coarse, len(inliers), result.icp_rmse, False)
    return TrackingResult(result.relative_pose, len(inliers), result.icp_rmse, True)


def track_sequence(frames, k: CameraIntrinsics, mask=None, seed: int = 0) -> list:
    """Chained camera trajectory, identity at frame 0.

    frames: iterable of (color, depth). Raises TrackingError annotated with
    the failing frame index.
    """
    if len(frames) < 2:
        raise TrackingError("need at least 2 frames")
    poses = [RigidTransform.identity()]
    for i in range(1, len(frames)):
        try:
            rel = track_pair(frames[i - 1], frames[i], k, mask=mask, seed=seed + i)
        except TrackingError as e:
            raise TrackingError(f"tracking failed at frame {i}: {e}") from e
        poses.append(compose(poses[-1], rel.relative_pose))
    return poses
