"""Update scheduling for the sliding-window filter.

Three schedules are implemented:

* ``delayed``: a feature's constraints enter the filter only once, when the
  feature is lost (or its poses are about to leave the window).
* ``immediate-all``: every tracked feature with enough views is
  re-triangulated and applied at every camera frame, using all of its
  observations.
* ``immediate-k``: the immediate schedule restricted to k selected views
  per feature per frame (first/middle/last for k = 3).

All eligible features of a frame are concatenated into a single stacked
EKF update.  The covariance-form Joseph update is the production path; the
information-form update is kept as an independent cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .propagation import (
    IMU_ERR_DIM,
    ImuSample,
    ImuState,
    NoiseSpec,
    continuous_jacobians,
    rk4_propagate,
)
from .state import (
    AugmentedState,
    apply_correction,
    augment,
    marginalize,
    propagate_window_cov,
)
from .vision import (
    DEFAULT_TRIANGULATION,
    FeatureTrack,
    MeasurementBlock,
    TriangulationConfig,
    build_feature_blocks,
    chi2_gate,
)

DEFAULT_MIN_TRACK_LEN = 3


@dataclass(frozen=True)
class Strategy:
    """Update schedule selector; ``k`` only applies to ``immediate-k``."""

    kind: str = "delayed"
    k: int = 3

    _KINDS = ("delayed", "immediate-all", "immediate-k")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {self._KINDS}")
        if self.kind == "immediate-k" and self.k < 3:
            raise ValueError("immediate-k requires k >= 3")

    @property
    def immediate(self) -> bool:
        return self.kind != "delayed"

    @property
    def label(self) -> str:
        return f"immediate-k{self.k}" if self.kind == "immediate-k" else self.kind


@dataclass
class UpdateReport:
    """Counters for one frame (or an aggregate over frames/runs)."""

    constraints: int = 0
    updates: int = 0
    imu_corrections: int = 0
    pose_corrections: dict = field(default_factory=dict)
    feature_constraints: dict = field(default_factory=dict)
    features_skipped: int = 0

    def merge(self, other: "UpdateReport") -> "UpdateReport":
        self.constraints += other.constraints
        self.updates += other.updates
        self.imu_corrections += other.imu_corrections
        self.features_skipped += other.features_skipped
        for pid, n in other.pose_corrections.items():
            self.pose_corrections[pid] = self.pose_corrections.get(pid, 0) + n
        for fid, n in other.feature_constraints.items():
            self.feature_constraints[fid] = self.feature_constraints.get(fid, 0) + n
        return self


def constraint_counter(reports) -> UpdateReport:
    """Aggregate a stream of per-frame reports into totals."""
    total = UpdateReport()
    for r in reports:
        total.merge(r)
    return total


def select_views_kcam(m: int, k: int):
    """Indices of the k views used per update from m observing views.

    For k = 3 this is first/middle/last with the middle index rounded
    toward the earlier view.  For k > 3 the indices are spread evenly over
    the track, always including both endpoints.  All views are returned
    when m <= k.
    """
    if m <= k:
        return list(range(m))
    if k == 3:
        middle = (m + 1) // 2 - 1  # 1-based ceil(m/2), ties to earlier
        return [0, middle, m - 1]
    ideal = [(m - 1) * j / (k - 1) for j in range(k)]
    chosen = []
    for pos in ideal:
        idx = int(round(pos))
        if idx not in chosen:
            chosen.append(idx)
    unused = [i for i in range(m) if i not in chosen]
    while len(chosen) < k and unused:
        # backfill with the unused index closest to any ideal position
        best = min(unused, key=lambda i: (min(abs(i - p) for p in ideal), i))
        chosen.append(best)
        unused.remove(best)
    return sorted(chosen)


def _isotropic_sigma2(Rm: np.ndarray):
    """Variance if Rm is a positive multiple of the identity, else None."""
    d = np.diagonal(Rm)
    if d.size == 0 or d[0] <= 0.0 or np.ptp(d) != 0.0:
        return None
    if np.count_nonzero(Rm) != np.count_nonzero(d):
        return None
    return float(d[0])


def _compress(H, resid, leading_zero_cols=0):
    """Exact orthonormal row compression of an overdetermined update.

    With isotropic noise, any orthonormal row transform leaves the
    posterior unchanged.  The compressed rows are rebuilt from the
    eigendecomposition of the Gram matrix H^T H (cheaper than a tall QR);
    directions with zero information are dropped.  ``leading_zero_cols``
    skips columns known to be structurally zero (the stacked vision
    Jacobians never touch the IMU block).
    """
    z = leading_zero_cols
    n = H.shape[1]
    Hz = H[:, z:]
    N = scipy.linalg.blas.dsyrk(1.0, Hz, trans=1, lower=0)
    N = N + np.triu(N, 1).T
    g = Hz.T @ resid
    lam, V = scipy.linalg.eigh(N, check_finite=False)
    lam_max = lam[-1] if lam.size else 0.0
    keep = lam > max(lam_max, 0.0) * 1e-14
    if not np.any(keep):
        return np.zeros((0, n)), np.zeros(0)
    root = np.sqrt(lam[keep])
    Vk = V[:, keep]
    Hc = np.zeros((root.size, n))
    Hc[:, z:] = root[:, None] * Vk.T
    rc = (Vk.T @ g) / root
    return Hc, rc


def kalman_correction(P, H, Rm, resid, isotropic_sigma2=None,
                      leading_zero_cols=0):
    """Joseph-form covariance update; returns (dx, P_new) or None if the
    innovation covariance cannot be factorized.

    ``isotropic_sigma2`` declares Rm = sigma^2 I without materializing it,
    which keeps wide stacked updates cheap; otherwise isotropy is detected
    from Rm.  Overdetermined isotropic updates are row-compressed to at
    most the state dimension first (an exact, orthonormal reduction).
    """
    n = P.shape[0]
    sigma2 = isotropic_sigma2 if isotropic_sigma2 is not None else None
    if sigma2 is None and H.shape[0] > n:
        sigma2 = _isotropic_sigma2(Rm)
    if sigma2 is not None and H.shape[0] > n:
        H, resid = _compress(H, resid, leading_zero_cols)
        if H.shape[0] == 0:
            return np.zeros(n), P.copy()

    HP = H @ P
    S = HP @ H.T
    if sigma2 is not None:
        S[np.diag_indices_from(S)] += sigma2
    else:
        S = S + Rm
    try:
        L = scipy.linalg.cho_factor(S, check_finite=False)
    except scipy.linalg.LinAlgError:
        return None
    K = scipy.linalg.cho_solve(L, HP, check_finite=False).T
    dx = K @ resid
    I_KH = np.eye(n) - K @ H
    P_new = I_KH @ P @ I_KH.T
    if sigma2 is not None:
        P_new += sigma2 * (K @ K.T)
    else:
        P_new += K @ Rm @ K.T
    return dx, 0.5 * (P_new + P_new.T)


def information_correction(P, H, Rm, resid):
    """Information-form update: P+ = (P^-1 + H^T R^-1 H)^-1."""
    P_inv = np.linalg.inv(P)
    Rm_inv = np.linalg.inv(Rm)
    info = P_inv + H.T @ Rm_inv @ H
    P_new = np.linalg.inv(info)
    P_new = 0.5 * (P_new + P_new.T)
    dx = P_new @ (H.T @ (Rm_inv @ resid))
    return dx, P_new


def ekf_update(state: AugmentedState, P, block: MeasurementBlock):
    """Apply one stacked measurement block to the filter state.

    Returns ``(state, P, applied)``; a failed innovation factorization
    leaves the inputs untouched with ``applied`` False.
    """
    if block.H.shape[1] != state.dim:
        raise ValueError(
            f"block width {block.H.shape[1]} does not match state dim {state.dim}")
    out = kalman_correction(P, block.H, block.Rm, block.resid)
    if out is None:
        return state, P, False
    dx, P_new = out
    return apply_correction(state, dx), P_new, True


def information_update_oracle(state: AugmentedState, P, block: MeasurementBlock):
    """Reference update via additive Fisher information (test oracle)."""
    dx, P_new = information_correction(P, block.H, block.Rm, block.resid)
    return apply_correction(state, dx), P_new


class MsckfFilter:
    """Sliding-window visual-inertial filter with a pluggable update schedule."""

    def __init__(self, imu_state: ImuState, P0, noise: NoiseSpec,
                 strategy: Strategy = Strategy("delayed"),
                 n_max: int = 20,
                 min_track_len: int = DEFAULT_MIN_TRACK_LEN,
                 sigma_px_norm: float = 1.0 / 460.0,
                 use_chi2_gate: bool = False,
                 gravity=None,
                 triangulation: TriangulationConfig = DEFAULT_TRIANGULATION):
        P0 = np.asarray(P0, dtype=float)
        if P0.shape != (IMU_ERR_DIM, IMU_ERR_DIM):
            raise ValueError("initial covariance must be 21x21")
        self.state = AugmentedState(imu_state.copy(), n_max=n_max)
        self.P = P0.copy()
        self.noise = noise
        self.strategy = strategy
        self.min_track_len = min_track_len
        self.sigma_px_norm = sigma_px_norm
        self.use_chi2_gate = use_chi2_gate
        self.gravity = gravity
        self.triangulation = triangulation
        self.tracks: dict[int, FeatureTrack] = {}
        self.last_nullspace_defect = 0.0
        self.update_trace_violations = 0
        self._next_pose_id = 0
        self._gqgt = self._const_gqgt()

    # -- propagation -------------------------------------------------------

    def _const_gqgt(self) -> np.ndarray:
        """G Q G^T is state-independent: the accel-noise block rotates an
        isotropic covariance, so every block is a constant multiple of I."""
        out = np.zeros((IMU_ERR_DIM, IMU_ERR_DIM))
        for sl, sigma in ((slice(0, 3), self.noise.sigma_g),
                          (slice(3, 6), self.noise.sigma_a),
                          (slice(9, 12), self.noise.sigma_bg),
                          (slice(12, 15), self.noise.sigma_ba)):
            out[sl, sl] = sigma**2 * np.eye(3)
        return out

    def process_imu(self, s0: ImuSample, s1: ImuSample):
        """Propagate the IMU state and full covariance over one IMU interval."""
        dt = s1.t - s0.t
        if dt <= 0.0:
            raise ValueError(f"IMU timestamps must increase (got dt={dt})")
        w_mid = 0.5 * (s0.gyro + s1.gyro) - self.state.imu.bg
        f_mid = 0.5 * (s0.accel + s1.accel) - self.state.imu.ba
        F, _ = continuous_jacobians(self.state.imu, w_mid, f_mid)
        Phi = np.eye(IMU_ERR_DIM) + F * dt
        GQGt = self._gqgt
        Qd = (GQGt + Phi @ GQGt @ Phi.T) * (dt / 2.0)
        self.P = propagate_window_cov(self.P, Phi, 0.5 * (Qd + Qd.T))
        if self.gravity is not None:
            self.state.imu = rk4_propagate(self.state.imu, s0, s1, self.gravity)
        else:
            self.state.imu = rk4_propagate(self.state.imu, s0, s1)

    # -- frame handling ----------------------------------------------------

    def process_frame(self, t: float, observations) -> UpdateReport:
        """Run one camera epoch: window upkeep, augmentation, ingestion, update.

        ``observations`` is an iterable of (feature_id, z_normalized) pairs.
        """
        report = UpdateReport()
        if len(self.state.window) >= self.state.n_max:
            report.merge(self._shrink_window())

        pose_id = self._next_pose_id
        self._next_pose_id += 1
        self.state, self.P = augment(self.state, self.P, pose_id, t)

        newly_lost = self._ingest(pose_id, observations)
        if self.strategy.immediate:
            report.merge(self.immediate_step())
            for fid in newly_lost:
                del self.tracks[fid]
        else:
            report.merge(self.delayed_step(newly_lost))
        return report

    def _ingest(self, pose_id: int, observations):
        seen = set()
        for fid, z in observations:
            seen.add(fid)
            track = self.tracks.get(fid)
            if track is None:
                track = FeatureTrack(feature_id=fid)
                self.tracks[fid] = track
            track.add(pose_id, z)
        newly_lost = []
        for fid, track in self.tracks.items():
            if fid not in seen and track.status == "active":
                track.status = "lost"
                newly_lost.append(fid)
        return sorted(newly_lost)

    def _shrink_window(self) -> UpdateReport:
        """Make room by retiring the two oldest poses.

        The delayed schedule first consumes every track observing those
        poses in a final update; immediate schedules marginalize directly
        since those constraints were already absorbed frame by frame.
        """
        report = UpdateReport()
        victims = {c.pose_id for c in self.state.window[:2]}
        if not self.strategy.immediate:
            affected = sorted(
                fid for fid, tr in self.tracks.items()
                if any(pid in victims for pid in tr.pose_ids))
            report.merge(self._consume_tracks(affected))
        for tr in self.tracks.values():
            tr.drop_poses(victims)
        for fid in [fid for fid, tr in self.tracks.items() if len(tr) == 0]:
            del self.tracks[fid]
        self.state, self.P = marginalize(self.state, self.P, victims)
        return report

    # -- update schedules ----------------------------------------------------

    def _pose_map(self):
        return {c.pose_id: c for c in self.state.window}

    def _collect_blocks(self, jobs, report: UpdateReport):
        """Run the batched feature pipeline and fold the outcomes into counters."""
        blocks = []
        outs = build_feature_blocks(jobs, self.state, self.sigma_px_norm,
                                    self.triangulation)
        for track, block, p_Gf in outs:
            track.p_Gf_hint = p_Gf
            if block is None:
                report.features_skipped += 1
                continue
            if self.use_chi2_gate and not chi2_gate(block, self.P):
                report.features_skipped += 1
                continue
            m = (block.rows + 3) // 2
            report.feature_constraints[track.feature_id] = (
                report.feature_constraints.get(track.feature_id, 0) + m)
            report.constraints += m
            self.last_nullspace_defect = max(self.last_nullspace_defect,
                                             block.nullspace_defect)
            blocks.append(block)
        return blocks

    def _apply_blocks(self, blocks, report: UpdateReport):
        if not blocks:
            return
        H = np.vstack([b.H for b in blocks])
        resid = np.concatenate([b.resid for b in blocks])
        sigma2 = float(blocks[0].Rm[0, 0]) if blocks[0].Rm.size else 0.0
        # stacked vision rows never touch the IMU-error columns
        out = kalman_correction(self.P, H, None, resid, isotropic_sigma2=sigma2,
                                leading_zero_cols=IMU_ERR_DIM)
        if out is not None:
            dx, P_new = out
            if np.trace(P_new) > np.trace(self.P) * (1.0 + 1e-12) + 1e-12:
                self.update_trace_violations += 1
            self.P = P_new
            self.state = apply_correction(self.state, dx)
            report.updates += 1
            report.imu_corrections += 1
            for clone in self.state.window:
                report.pose_corrections[clone.pose_id] = (
                    report.pose_corrections.get(clone.pose_id, 0) + 1)

    def _consume_tracks(self, feature_ids) -> UpdateReport:
        """Delayed-style terminal update for the given tracks, then drop them."""
        report = UpdateReport()
        jobs = []
        for fid in feature_ids:
            track = self.tracks[fid]
            if len(track) >= 2:
                jobs.append((track, None))
            else:
                report.features_skipped += 1
        blocks = self._collect_blocks(jobs, report)
        self._apply_blocks(blocks, report)
        for fid in feature_ids:
            del self.tracks[fid]
        return report

    def delayed_step(self, newly_lost) -> UpdateReport:
        """Consume the tracks that were lost at this frame in one update."""
        return self._consume_tracks(newly_lost)

    def immediate_step(self) -> UpdateReport:
        """Re-triangulate and apply every sufficiently long active track."""
        report = UpdateReport()
        jobs = []
        for fid in sorted(self.tracks):
            track = self.tracks[fid]
            if track.status != "active" or len(track) < self.min_track_len:
                continue
            selected = None
            if self.strategy.kind == "immediate-k":
                selected = select_views_kcam(len(track), self.strategy.k)
            jobs.append((track, selected))
        blocks = self._collect_blocks(jobs, report)
        self._apply_blocks(blocks, report)
        return report
