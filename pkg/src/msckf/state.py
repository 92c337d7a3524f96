"""Sliding-window filter state and its covariance bookkeeping.

The full error vector stacks the 21-dim IMU/mounting error block with one
6-dim block per windowed camera pose:

    [ imu error (21) | dtheta_C1, dp_C1 | ... | dtheta_CN, dp_CN ]

The covariance is the matching (21+6N) x (21+6N) matrix.  All operations
return new state objects; covariance matrices are plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import (
    correct_quat,
    quat_conj,
    quat_mul,
    quat_to_rot,
    skew,
    small_angle_quat,
)
from .propagation import ATT, CLONE_DIM, EXT_ATT, IMU_ERR_DIM, POS, ImuState

DEFAULT_WINDOW_SIZE = 20


class WindowFullError(ValueError):
    """Raised when augmenting a window that already holds ``n_max`` poses."""


@dataclass
class CameraPoseState:
    """One stochastic clone: camera attitude (global-to-camera) and position."""

    pose_id: int
    t: float
    q_GC: np.ndarray
    p_GC: np.ndarray

    def __post_init__(self):
        self.q_GC = np.asarray(self.q_GC, dtype=float)
        self.p_GC = np.asarray(self.p_GC, dtype=float)

    def copy(self) -> "CameraPoseState":
        return CameraPoseState(self.pose_id, self.t, self.q_GC.copy(), self.p_GC.copy())


@dataclass
class AugmentedState:
    """IMU state plus the ordered window of past camera poses."""

    imu: ImuState
    window: list = field(default_factory=list)
    n_max: int = DEFAULT_WINDOW_SIZE

    def copy(self) -> "AugmentedState":
        return AugmentedState(self.imu.copy(), [c.copy() for c in self.window], self.n_max)

    @property
    def dim(self) -> int:
        return IMU_ERR_DIM + CLONE_DIM * len(self.window)

    def pose_index(self, pose_id: int) -> int:
        for i, clone in enumerate(self.window):
            if clone.pose_id == pose_id:
                return i
        raise KeyError(f"pose_id {pose_id} not in window")


def clone_offset(index: int) -> int:
    """Column/row offset of the ``index``-th windowed pose in the error vector."""
    return IMU_ERR_DIM + CLONE_DIM * index


def camera_pose_from_imu(imu: ImuState, pose_id: int = 0, t: float = 0.0) -> CameraPoseState:
    """Camera pose implied by the IMU pose and the mounting parameters."""
    q_GC = quat_mul(quat_conj(imu.q_CI), imu.q_GI)
    p_GC = imu.p + quat_to_rot(imu.q_GI).T @ imu.p_IC
    return CameraPoseState(pose_id, t, q_GC, p_GC)


def augmentation_jacobian(imu: ImuState) -> np.ndarray:
    """6x21 Jacobian of the new camera-pose error w.r.t. the IMU error block.

    Attitude row: C_I_C in the IMU-attitude column and identity in the
    mounting-attitude column.  Position row: -C_G_I^T skew(p_IC) in the
    IMU-attitude column and identity in the position column.  The mounting
    translation column is zero.
    """
    C_IC = quat_to_rot(imu.q_CI).T
    C_GI_T = quat_to_rot(imu.q_GI).T
    J = np.zeros((CLONE_DIM, IMU_ERR_DIM))
    J[0:3, ATT] = C_IC
    J[0:3, EXT_ATT] = np.eye(3)
    J[3:6, ATT] = -C_GI_T @ skew(imu.p_IC)
    J[3:6, POS] = np.eye(3)
    return J


def augment(state: AugmentedState, P: np.ndarray, pose_id: int, t: float):
    """Append the current camera pose to the window and grow the covariance.

    The new 6 rows/columns are J P and J P J^T with J = [J_IC, 0]; the
    pre-existing block is untouched.
    """
    n = state.dim
    if P.shape != (n, n):
        raise ValueError(f"covariance shape {P.shape} does not match state dim {n}")
    if len(state.window) >= state.n_max:
        raise WindowFullError(
            f"window already holds {state.n_max} poses; marginalize first")

    out = state.copy()
    out.window.append(camera_pose_from_imu(state.imu, pose_id, t))

    J_IC = augmentation_jacobian(state.imu)
    JP = J_IC @ P[:IMU_ERR_DIM, :]          # 6 x n
    P_new = np.empty((n + CLONE_DIM, n + CLONE_DIM))
    P_new[:n, :n] = P
    P_new[n:, :n] = JP
    P_new[:n, n:] = JP.T
    P_new[n:, n:] = J_IC @ P[:IMU_ERR_DIM, :IMU_ERR_DIM] @ J_IC.T
    return out, 0.5 * (P_new + P_new.T)


def apply_correction(state: AugmentedState, dx: np.ndarray) -> AugmentedState:
    """Inject an error-state correction into the nominal state.

    Attitudes are corrected multiplicatively on the left; all vector states
    additively.  The mounting attitude error is parameterized on the
    IMU-to-camera rotation (matching the identity block of the augmentation
    Jacobian), so correcting the stored camera-to-IMU quaternion
    right-multiplies by the inverted small rotation.
    """
    dx = np.asarray(dx, dtype=float)
    if dx.shape != (state.dim,):
        raise ValueError(f"correction length {dx.shape} does not match state dim {state.dim}")

    out = state.copy()
    imu = out.imu
    imu.q_GI = correct_quat(imu.q_GI, dx[ATT])
    imu.v = imu.v + dx[3:6]
    imu.p = imu.p + dx[6:9]
    imu.bg = imu.bg + dx[9:12]
    imu.ba = imu.ba + dx[12:15]
    imu.q_CI = quat_mul(imu.q_CI, small_angle_quat(-dx[EXT_ATT]))
    imu.p_IC = imu.p_IC + dx[18:21]

    for i, clone in enumerate(out.window):
        off = clone_offset(i)
        clone.q_GC = correct_quat(clone.q_GC, dx[off:off + 3])
        clone.p_GC = clone.p_GC + dx[off + 3:off + 6]
    return out


def marginalize(state: AugmentedState, P: np.ndarray, pose_ids):
    """Drop the given poses and their covariance rows/columns."""
    pose_ids = set(pose_ids)
    known = {c.pose_id for c in state.window}
    unknown = pose_ids - known
    if unknown:
        raise ValueError(f"unknown pose_ids {sorted(unknown)}")
    if not pose_ids:
        return state.copy(), P.copy()

    keep = list(range(IMU_ERR_DIM))
    new_window = []
    for i, clone in enumerate(state.window):
        if clone.pose_id in pose_ids:
            continue
        off = clone_offset(i)
        keep.extend(range(off, off + CLONE_DIM))
        new_window.append(clone.copy())

    out = AugmentedState(state.imu.copy(), new_window, state.n_max)
    return out, P[np.ix_(keep, keep)].copy()


def propagate_window_cov(P: np.ndarray, Phi: np.ndarray, Qd: np.ndarray) -> np.ndarray:
    """Propagate the full covariance when only the IMU block evolves.

    The window poses are static, so the transition is block-diagonal
    [Phi, I] and only the IMU block and the IMU-window cross terms change.
    """
    out = P.copy()
    out[:IMU_ERR_DIM, :IMU_ERR_DIM] = (
        Phi @ P[:IMU_ERR_DIM, :IMU_ERR_DIM] @ Phi.T + Qd)
    if P.shape[0] > IMU_ERR_DIM:
        cross = Phi @ P[:IMU_ERR_DIM, IMU_ERR_DIM:]
        out[:IMU_ERR_DIM, IMU_ERR_DIM:] = cross
        out[IMU_ERR_DIM:, :IMU_ERR_DIM] = cross.T
    return 0.5 * (out + out.T)
