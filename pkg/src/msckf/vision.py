"""Structureless vision measurements: projection, Jacobians, triangulation,
stacking over the window, and left-null-space projection.

All image measurements are in normalized (focal-length-free) coordinates.
The per-feature pipeline is

    triangulate -> stack_feature -> nullspace_project -> MeasurementBlock

and a MeasurementBlock carries rows only over camera-pose error columns;
the IMU block columns are identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
from scipy.stats import chi2 as chi2_dist

from .geom import quat_to_rot, skew
from .propagation import IMU_ERR_DIM
from .state import AugmentedState, CameraPoseState, clone_offset

DEPTH_MIN = 0.01


class BehindCameraError(ValueError):
    """Projection requested for a point at or behind the camera plane."""


class FeatureTrack:
    """Observations of one feature, ordered by pose id (i.e. by time).

    Stored as growing arrays so a frame's worth of tracks batches cheaply;
    ``observations`` materializes the (pose_id, z) pairs on demand.
    """

    __slots__ = ("feature_id", "status", "p_Gf_hint", "_pids", "_zs", "_n")

    def __init__(self, feature_id: int, observations=None, status: str = "active"):
        self.feature_id = feature_id
        self.status = status
        self.p_Gf_hint: np.ndarray | None = None
        self._pids = np.empty(8, dtype=np.int64)
        self._zs = np.empty((8, 2))
        self._n = 0
        for pid, z in observations or ():
            self.add(pid, z)

    def add(self, pose_id: int, z):
        if self._n and pose_id <= self._pids[self._n - 1]:
            raise ValueError("pose ids must be strictly increasing within a track")
        if self._n == len(self._pids):
            self._pids = np.concatenate([self._pids, np.empty_like(self._pids)])
            self._zs = np.concatenate([self._zs, np.empty_like(self._zs)])
        self._pids[self._n] = pose_id
        self._zs[self._n] = z
        self._n += 1

    def drop_poses(self, pose_ids):
        """Remove observations taken from the given poses."""
        pids = self._pids[:self._n]
        keep = np.ones(self._n, dtype=bool)
        for pid in pose_ids:
            keep &= pids != pid
        kept = int(keep.sum())
        if kept == self._n:
            return
        self._pids[:kept] = pids[keep]
        self._zs[:kept] = self._zs[:self._n][keep]
        self._n = kept

    @property
    def pid_array(self) -> np.ndarray:
        return self._pids[:self._n]

    @property
    def z_array(self) -> np.ndarray:
        return self._zs[:self._n]

    @property
    def observations(self):
        return [(int(pid), z.copy()) for pid, z in
                zip(self._pids[:self._n], self._zs[:self._n])]

    @property
    def pose_ids(self):
        return [int(p) for p in self._pids[:self._n]]

    def __len__(self):
        return self._n


@dataclass
class FeaturePosition:
    p_Gf: np.ndarray
    valid: bool
    reason: str = ""


@dataclass
class MeasurementBlock:
    """Stacked, null-space-projected feature constraints for one update."""

    H: np.ndarray        # r x (21 + 6N)
    resid: np.ndarray    # r
    Rm: np.ndarray       # r x r
    pose_ids: tuple = ()
    nullspace_defect: float = 0.0  # max |A^T H_f| at construction time

    @property
    def rows(self) -> int:
        return self.H.shape[0]


@dataclass
class TriangulationConfig:
    max_iters: int = 10
    step_tol: float = 1e-8
    depth_min: float = DEPTH_MIN
    min_parallax_deg: float = 1.0
    max_mean_reproj: float = 5.0 / 460.0


DEFAULT_TRIANGULATION = TriangulationConfig()


def project(p_Gf, cam: CameraPoseState, depth_min: float = DEPTH_MIN) -> np.ndarray:
    """Normalized image coordinates of a global point in the given camera."""
    C = quat_to_rot(cam.q_GC)
    p_C = C @ (np.asarray(p_Gf, dtype=float) - cam.p_GC)
    if p_C[2] <= depth_min:
        raise BehindCameraError(f"depth {p_C[2]:.4f} m is at or behind the camera")
    return p_C[:2] / p_C[2]


def point_jacobians(p_Gf, cam: CameraPoseState, depth_min: float = DEPTH_MIN):
    """Measurement Jacobians w.r.t. the camera-pose error and the feature position.

    Returns ``(H_Ci, H_fi)`` with ``H_Ci`` 2x6 (attitude block, then position
    block) and ``H_fi`` 2x3.
    """
    C = quat_to_rot(cam.q_GC)
    p_C = C @ (np.asarray(p_Gf, dtype=float) - cam.p_GC)
    x, y, z = p_C
    if z <= depth_min:
        raise BehindCameraError(f"depth {z:.4f} m is at or behind the camera")
    J = np.array([[1.0 / z, 0.0, -x / z**2],
                  [0.0, 1.0 / z, -y / z**2]])
    H_fi = J @ C
    H_Ci = np.hstack([J @ skew(p_C), -H_fi])
    return H_Ci, H_fi


def _gather_views(track: FeatureTrack, pose_map, window_cache=None):
    zs = track.z_array.copy()
    if window_cache is not None:
        _, Cs_all, centers_all, lut = window_cache
        idx = lut[track.pid_array]
        return Cs_all[idx], centers_all[idx], zs
    Cs, centers = [], []
    for pid in track.pid_array:
        cam = pose_map[pid]
        Cs.append(quat_to_rot(cam.q_GC))
        centers.append(cam.p_GC)
    return np.array(Cs), np.array(centers), zs


def _linear_init(Cs, centers, zs):
    """Least-squares intersection of the viewing rays."""
    d_cam = np.concatenate([zs, np.ones((len(zs), 1))], axis=1)
    d_glob = np.einsum("mji,mj->mi", Cs, d_cam)
    d_glob /= np.linalg.norm(d_glob, axis=1, keepdims=True)
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for d, c in zip(d_glob, centers):
        M = np.eye(3) - np.outer(d, d)
        A += M
        b += M @ c
    return np.linalg.solve(A, b)


def _reproject(Cs, centers, zs, p):
    p_C = np.einsum("mij,mj->mi", Cs, p - centers)
    depths = p_C[:, 2]
    # depths are gated by the caller; silence transient divide warnings
    with np.errstate(divide="ignore", invalid="ignore"):
        pred = p_C[:, :2] / depths[:, None]
    return p_C, depths, pred - zs


def triangulate(track: FeatureTrack, pose_map,
                cfg: TriangulationConfig = DEFAULT_TRIANGULATION,
                window_cache=None) -> FeaturePosition:
    """Estimate a feature's global position from its windowed observations.

    Linear ray intersection (or the track's warm start) followed by
    Gauss-Newton on the reprojection residuals.  Invalid when the geometry
    is degenerate, any depth is non-positive, the parallax is below the
    threshold, or the refined reprojection error stays large.
    """
    if len(track) < 2:
        return FeaturePosition(np.zeros(3), False, "needs at least two views")
    Cs, centers, zs = _gather_views(track, pose_map, window_cache)

    if track.p_Gf_hint is not None:
        p = track.p_Gf_hint.copy()
    else:
        try:
            p = _linear_init(Cs, centers, zs)
        except np.linalg.LinAlgError:
            return FeaturePosition(np.zeros(3), False, "degenerate ray geometry")

    for _ in range(cfg.max_iters):
        p_C, depths, err = _reproject(Cs, centers, zs, p)
        if np.any(depths <= cfg.depth_min):
            return FeaturePosition(p, False, "negative depth during refinement")
        z2 = depths**2
        Jp = np.zeros((len(depths), 2, 3))
        Jp[:, 0, 0] = 1.0 / depths
        Jp[:, 1, 1] = 1.0 / depths
        Jp[:, 0, 2] = -p_C[:, 0] / z2
        Jp[:, 1, 2] = -p_C[:, 1] / z2
        Hf = np.einsum("mab,mbc->mac", Jp, Cs).reshape(-1, 3)
        r = err.reshape(-1)
        JtJ = Hf.T @ Hf
        try:
            step = np.linalg.solve(JtJ, -Hf.T @ r)
        except np.linalg.LinAlgError:
            return FeaturePosition(p, False, "singular normal equations")
        p = p + step
        if np.linalg.norm(step) < cfg.step_tol:
            break
    else:
        if np.linalg.norm(step) > 1e3 * cfg.step_tol:
            return FeaturePosition(p, False, "no convergence")

    p_C, depths, err = _reproject(Cs, centers, zs, p)
    if np.any(depths <= cfg.depth_min):
        return FeaturePosition(p, False, "negative depth")
    rays = p - centers
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    cosines = rays @ rays.T
    min_cos = cosines[~np.eye(len(rays), dtype=bool)].min()
    parallax = np.degrees(np.arccos(np.clip(min_cos, -1.0, 1.0)))
    if parallax < cfg.min_parallax_deg:
        return FeaturePosition(p, False, "insufficient parallax")
    mean_err = np.linalg.norm(err, axis=1).mean()
    if mean_err > cfg.max_mean_reproj:
        return FeaturePosition(p, False, "reprojection error too large")
    return FeaturePosition(p, True)


def stack_feature(track: FeatureTrack, state: AugmentedState, p_Gf,
                  selected=None, window_cache=None):
    """Stack per-view Jacobians and residuals over the window columns.

    Rows are ordered by observation time; each 2-row band occupies the
    observing pose's 6 columns and the 3 feature columns.  Returns
    ``(H_C, H_f, dz)`` with shapes (2M, 21+6N), (2M, 3), (2M,).
    Observations whose projection falls behind the camera are dropped.

    ``window_cache`` (from :func:`build_window_cache`) lets a frame-level
    caller reuse the window's rotation matrices across features.
    """
    if window_cache is None:
        window_cache = build_window_cache(state)
    _, Cs_all, centers_all, lut = window_cache

    p_Gf = np.asarray(p_Gf, dtype=float)
    pids = track.pid_array
    zs = track.z_array
    if selected is not None:
        pids = pids[list(selected)]
        zs = zs[list(selected)]
    idx = lut[pids]
    Cs = Cs_all[idx]
    centers = centers_all[idx]

    p_C = np.einsum("mij,mj->mi", Cs, p_Gf - centers)
    good = p_C[:, 2] > DEPTH_MIN
    if np.count_nonzero(good) < 2:
        raise ValueError(
            f"feature {track.feature_id}: {int(np.count_nonzero(good))} usable views, need >= 2")
    if not np.all(good):
        idx, zs, Cs, p_C = idx[good], zs[good], Cs[good], p_C[good]

    M = len(idx)
    x, y, depth = p_C[:, 0], p_C[:, 1], p_C[:, 2]
    inv_z = 1.0 / depth
    J = np.zeros((M, 2, 3))
    J[:, 0, 0] = inv_z
    J[:, 1, 1] = inv_z
    J[:, 0, 2] = -x * inv_z**2
    J[:, 1, 2] = -y * inv_z**2

    # skew(p_C) batched
    S = np.zeros((M, 3, 3))
    S[:, 0, 1] = -depth
    S[:, 0, 2] = y
    S[:, 1, 0] = depth
    S[:, 1, 2] = -x
    S[:, 2, 0] = -y
    S[:, 2, 1] = x

    H_att = np.einsum("mab,mbc->mac", J, S)
    H_f_blocks = np.einsum("mab,mbc->mac", J, Cs)
    resid = zs - p_C[:, :2] * inv_z[:, None]

    H_C = np.zeros((2 * M, state.dim))
    rows = 2 * np.arange(M)
    cols = IMU_ERR_DIM + 6 * idx
    for r in range(M):
        off = cols[r]
        H_C[rows[r]:rows[r] + 2, off:off + 3] = H_att[r]
        H_C[rows[r]:rows[r] + 2, off + 3:off + 6] = -H_f_blocks[r]
    H_f = H_f_blocks.reshape(2 * M, 3)
    dz = resid.reshape(2 * M)
    return H_C, H_f, dz


def build_window_cache(state: AugmentedState):
    """Precompute window rotations, centers, and a pose-id lookup table."""
    index_of = {c.pose_id: i for i, c in enumerate(state.window)}
    n = len(state.window)
    Cs = np.zeros((n, 3, 3))
    centers = np.zeros((n, 3))
    for i, c in enumerate(state.window):
        Cs[i] = quat_to_rot(c.q_GC)
        centers[i] = c.p_GC
    max_pid = max(index_of) if index_of else 0
    lut = np.full(max_pid + 1, -1, dtype=np.int64)
    for pid, i in index_of.items():
        lut[pid] = i
    return index_of, Cs, centers, lut


def nullspace_project(H_C, H_f, dz, sigma_px_norm: float):
    """Remove the feature-position dependence via the left null space of H_f.

    Returns a MeasurementBlock with 2M-3 rows and isotropic noise
    sigma^2 I (the basis is orthonormal), or None when the feature
    geometry leaves H_f rank-deficient.
    """
    m2 = H_f.shape[0]
    if m2 < 4:
        return None
    A = scipy.linalg.null_space(H_f.T)
    if A.shape[1] != m2 - 3:
        return None
    H = A.T @ H_C
    resid = A.T @ dz
    Rm = sigma_px_norm**2 * np.eye(m2 - 3)
    defect = float(np.abs(A.T @ H_f).max())
    return MeasurementBlock(H=H, resid=resid, Rm=Rm, nullspace_defect=defect)


# -- batched frame-level pipeline ---------------------------------------------
#
# The per-feature functions above define the semantics; the batched builder
# below computes the same blocks for all of a frame's features at once,
# grouping tracks by view count so every step runs as one array operation
# per group.  This is what the filter uses in production.

def _solve3(A, b):
    """Batched 3x3 solve via the closed-form inverse; flags singular systems."""
    a, bb, c = A[:, 0, 0], A[:, 0, 1], A[:, 0, 2]
    d, e, f = A[:, 1, 0], A[:, 1, 1], A[:, 1, 2]
    g, h, i = A[:, 2, 0], A[:, 2, 1], A[:, 2, 2]
    m00 = e * i - f * h
    m01 = c * h - bb * i
    m02 = bb * f - c * e
    m10 = f * g - d * i
    m11 = a * i - c * g
    m12 = c * d - a * f
    m20 = d * h - e * g
    m21 = bb * g - a * h
    m22 = a * e - bb * d
    det = a * m00 + bb * m10 + c * m20
    ok = np.abs(det) > 1e-30
    det_safe = np.where(ok, det, 1.0)
    x = np.stack([
        (m00 * b[:, 0] + m01 * b[:, 1] + m02 * b[:, 2]) / det_safe,
        (m10 * b[:, 0] + m11 * b[:, 1] + m12 * b[:, 2]) / det_safe,
        (m20 * b[:, 0] + m21 * b[:, 1] + m22 * b[:, 2]) / det_safe,
    ], axis=1)
    return x, ok


def _projection_jacobians(p_C):
    """Batched 2x3 normalized-projection Jacobians for points (..., 3)."""
    shape = p_C.shape[:-1]
    inv_z = 1.0 / p_C[..., 2]
    J = np.zeros(shape + (2, 3))
    J[..., 0, 0] = inv_z
    J[..., 1, 1] = inv_z
    J[..., 0, 2] = -p_C[..., 0] * inv_z**2
    J[..., 1, 2] = -p_C[..., 1] * inv_z**2
    return J


def _triangulate_group(Cs, centers, zs, hints, has_hint, cfg):
    """Batched triangulation of T tracks sharing a view count.

    Returns (p, valid, p_C, err) with the camera-frame points and residuals
    evaluated at the final estimates.
    """
    T, m = zs.shape[:2]
    valid = np.ones(T, dtype=bool)

    d_cam = np.concatenate([zs, np.ones((T, m, 1))], axis=2)
    d_glob = np.einsum("tmji,tmj->tmi", Cs, d_cam)
    d_glob /= np.linalg.norm(d_glob, axis=2, keepdims=True)
    A = m * np.eye(3) - np.einsum("tmi,tmj->tij", d_glob, d_glob)
    dc = np.einsum("tmi,tmi->tm", d_glob, centers)
    b = centers.sum(axis=1) - np.einsum("tm,tmi->ti", dc, d_glob)
    p_lin, lin_ok = _solve3(A, b)
    p = np.where(has_hint[:, None], hints, p_lin)
    valid &= lin_ok | has_hint

    active = valid.copy()
    last_step = np.full(T, np.inf)
    for _ in range(cfg.max_iters):
        if not active.any():
            break
        p_C = np.einsum("tmij,tmj->tmi", Cs, p[:, None, :] - centers)
        depths = p_C[..., 2]
        bad = active & np.any(depths <= cfg.depth_min, axis=1)
        valid &= ~bad
        active &= ~bad
        with np.errstate(divide="ignore", invalid="ignore"):
            err = p_C[..., :2] / depths[..., None] - zs
        J = _projection_jacobians(p_C)
        Hf = np.einsum("tmab,tmbc->tmac", J, Cs).reshape(T, 2 * m, 3)
        r = err.reshape(T, 2 * m)
        JtJ = np.einsum("tri,trj->tij", Hf, Hf)
        g = np.einsum("tri,tr->ti", Hf, r)
        step, ok = _solve3(JtJ, -g)
        newly_bad = active & ~ok
        valid &= ~newly_bad
        active &= ~newly_bad
        p = np.where(active[:, None], p + step, p)
        stepn = np.linalg.norm(step, axis=1)
        last_step = np.where(active, stepn, last_step)
        active &= stepn >= cfg.step_tol
    valid &= ~(active & (last_step > 1e3 * cfg.step_tol))

    p_C = np.einsum("tmij,tmj->tmi", Cs, p[:, None, :] - centers)
    depths = p_C[..., 2]
    valid &= np.all(depths > cfg.depth_min, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        err = p_C[..., :2] / depths[..., None] - zs
        err = np.where(np.isfinite(err), err, 1e6)
    mean_err = np.linalg.norm(err, axis=2).mean(axis=1)
    valid &= mean_err <= cfg.max_mean_reproj

    rays = p[:, None, :] - centers
    rays /= np.maximum(np.linalg.norm(rays, axis=2, keepdims=True), 1e-300)
    cosines = np.einsum("tmi,tni->tmn", rays, rays)
    off_diag = cosines + 2.0 * np.eye(m)[None]
    min_cos = off_diag.min(axis=(1, 2))
    parallax = np.degrees(np.arccos(np.clip(min_cos, -1.0, 1.0)))
    valid &= parallax >= cfg.min_parallax_deg
    return p, valid, p_C, err


def build_feature_blocks(jobs, state: AugmentedState, sigma_px_norm: float,
                         cfg: TriangulationConfig = DEFAULT_TRIANGULATION,
                         window_cache=None):
    """Triangulate and project all of a frame's eligible tracks at once.

    ``jobs`` is a list of ``(track, selected)`` pairs (``selected`` being
    view indices or None for all views).  Returns, in input order, a list
    of ``(track, MeasurementBlock | None, p_Gf | None)``; a None block
    means the feature failed triangulation or has degenerate geometry.
    """
    if window_cache is None:
        window_cache = build_window_cache(state)
    index_of, Cs_all, centers_all, lut = window_cache
    dim = state.dim
    eps = np.finfo(float).eps

    groups = {}
    for j, (track, selected) in enumerate(jobs):
        key = (len(track), tuple(selected) if selected is not None else None)
        groups.setdefault(key, []).append(j)

    results = [None] * len(jobs)
    for (m, sel), members in sorted(groups.items(),
                                    key=lambda kv: (kv[0][0], kv[0][1] or ())):
        T = len(members)
        idx = np.empty((T, m), dtype=int)
        zs = np.empty((T, m, 2))
        hints = np.zeros((T, 3))
        has_hint = np.zeros(T, dtype=bool)
        for row, j in enumerate(members):
            track = jobs[j][0]
            idx[row] = lut[track.pid_array]
            zs[row] = track.z_array
            if track.p_Gf_hint is not None:
                hints[row] = track.p_Gf_hint
                has_hint[row] = True
        Cs = Cs_all[idx]
        centers = centers_all[idx]

        p, valid, p_C, err = _triangulate_group(Cs, centers, zs, hints, has_hint, cfg)

        if sel is None:
            sel_idx = np.arange(m)
        else:
            sel_idx = np.asarray(sel, dtype=int)
        ms = len(sel_idx)
        if ms < 2:
            for row, j in enumerate(members):
                results[j] = (jobs[j][0], None, p[row] if valid[row] else None)
            continue

        Cs_s = Cs[:, sel_idx]
        p_C_s = p_C[:, sel_idx]
        err_s = err[:, sel_idx]
        idx_s = idx[:, sel_idx]

        J = _projection_jacobians(p_C_s)
        S = np.zeros((T, ms, 3, 3))
        x, y, depth = p_C_s[..., 0], p_C_s[..., 1], p_C_s[..., 2]
        S[..., 0, 1] = -depth
        S[..., 0, 2] = y
        S[..., 1, 0] = depth
        S[..., 1, 2] = -x
        S[..., 2, 0] = -y
        S[..., 2, 1] = x
        H_att = np.einsum("tmab,tmbc->tmac", J, S)
        Hf_blk = np.einsum("tmab,tmbc->tmac", J, Cs_s)
        Hf = Hf_blk.reshape(T, 2 * ms, 3)
        dz = (-err_s).reshape(T, 2 * ms)

        U, sv, _ = np.linalg.svd(Hf)
        rank3 = sv[:, 2] > sv[:, 0] * max(2 * ms, 3) * eps
        A = U[:, :, 3:]
        At = A.transpose(0, 2, 1)

        H_C = np.zeros((T, 2 * ms, dim))
        band = np.concatenate([H_att, -Hf_blk], axis=3)  # (T, ms, 2, 6)
        t_i = np.arange(T)[:, None, None, None]
        row_i = (2 * np.arange(ms))[None, :, None, None] + np.arange(2)[None, None, :, None]
        col_i = (IMU_ERR_DIM + 6 * idx_s)[:, :, None, None] + np.arange(6)[None, None, None, :]
        H_C[t_i, row_i, col_i] = band

        H_proj = At @ H_C
        r_proj = (At @ dz[..., None])[..., 0]
        defect = np.abs(At @ Hf).max(axis=(1, 2))

        Rm = sigma_px_norm**2 * np.eye(2 * ms - 3)
        for row, j in enumerate(members):
            track = jobs[j][0]
            if valid[row] and rank3[row]:
                block = MeasurementBlock(H=H_proj[row], resid=r_proj[row],
                                         Rm=Rm, nullspace_defect=float(defect[row]))
                results[j] = (track, block, p[row])
            else:
                results[j] = (track, None, p[row] if valid[row] else None)
    return results


@lru_cache(maxsize=256)
def _chi2_threshold(dof: int, confidence: float = 0.95) -> float:
    return float(chi2_dist.ppf(confidence, dof))


def chi2_gate(block: MeasurementBlock, P: np.ndarray,
              confidence: float = 0.95) -> bool:
    """Mahalanobis innovation gate at the given chi-square confidence."""
    S = block.H @ P @ block.H.T + block.Rm
    try:
        L = scipy.linalg.cho_factor(S)
    except scipy.linalg.LinAlgError:
        return False
    gamma = float(block.resid @ scipy.linalg.cho_solve(L, block.resid))
    return gamma <= _chi2_threshold(block.rows, confidence)
