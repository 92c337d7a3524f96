"""IMU strapdown integration and error-state covariance propagation.

The 21-dimensional error state is laid out as

    [ dtheta_I | dv | dp | dbg | dba | dtheta_C | dp_IC ]

where the first five blocks are the IMU attitude/velocity/position/bias
errors and the last two are the camera-IMU mounting errors.  The mounting
parameters have no dynamics and no process noise, so their rows and
columns of the continuous-time Jacobians are identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import omega_matrix, quat_normalize, quat_to_rot, skew

DEFAULT_GRAVITY = np.array([0.0, 0.0, -9.81])

IMU_ERR_DIM = 21
CLONE_DIM = 6
NOISE_DIM = 12

# error-state block slices
ATT = slice(0, 3)
VEL = slice(3, 6)
POS = slice(6, 9)
BG = slice(9, 12)
BA = slice(12, 15)
EXT_ATT = slice(15, 18)
EXT_POS = slice(18, 21)

_MAX_STEP = 0.05 + 1e-9


@dataclass
class ImuSample:
    """One IMU reading: body angular rate (rad/s) and specific force (m/s^2)."""

    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)


@dataclass
class ImuState:
    """Full navigation state plus IMU biases and camera mounting parameters.

    ``q_GI`` rotates global coordinates into the IMU frame, ``q_CI`` rotates
    camera coordinates into the IMU frame, and ``p_IC`` is the camera origin
    expressed in the IMU frame.
    """

    q_GI: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_CI: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    p_IC: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("q_GI", "v", "p", "bg", "ba", "q_CI", "p_IC"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def copy(self) -> "ImuState":
        return ImuState(*(getattr(self, n).copy() for n in
                          ("q_GI", "v", "p", "bg", "ba", "q_CI", "p_IC")))


@dataclass
class NoiseSpec:
    """Continuous-time IMU noise densities (SI units, per sqrt(Hz))."""

    sigma_g: float = 0.0
    sigma_a: float = 0.0
    sigma_bg: float = 0.0
    sigma_ba: float = 0.0

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")

    def Q(self) -> np.ndarray:
        """12x12 continuous process-noise covariance (gyro, accel, both walks)."""
        d = np.concatenate([
            np.full(3, self.sigma_g**2),
            np.full(3, self.sigma_a**2),
            np.full(3, self.sigma_bg**2),
            np.full(3, self.sigma_ba**2),
        ])
        return np.diag(d)


def bias_compensate(sample: ImuSample, state: ImuState):
    """Subtract the estimated biases from a raw IMU sample."""
    return sample.gyro - state.bg, sample.accel - state.ba


def rk4_propagate(state: ImuState, s0: ImuSample, s1: ImuSample,
                  g=DEFAULT_GRAVITY) -> ImuState:
    """Integrate attitude/velocity/position over one IMU interval with RK4.

    Biases and mounting parameters are held constant.  The IMU inputs at the
    RK4 midpoint are linearly interpolated between the two samples.
    """
    dt = s1.t - s0.t
    if dt <= 0.0:
        raise ValueError(f"IMU timestamps must increase (got dt={dt})")
    if dt > _MAX_STEP:
        raise ValueError(f"IMU step {dt} s exceeds the 0.05 s integrator limit")

    g = np.asarray(g, dtype=float)
    w0, f0 = s0.gyro - state.bg, s0.accel - state.ba
    w1, f1 = s1.gyro - state.bg, s1.accel - state.ba
    wm, fm = 0.5 * (w0 + w1), 0.5 * (f0 + f1)

    def deriv(q, v, w, f):
        qn = quat_normalize(q)
        dq = 0.5 * omega_matrix(w) @ q
        dv = quat_to_rot(qn).T @ f + g
        return dq, dv, v

    q0, v0, p0 = state.q_GI, state.v, state.p
    k1q, k1v, k1p = deriv(q0, v0, w0, f0)
    k2q, k2v, k2p = deriv(q0 + 0.5 * dt * k1q, v0 + 0.5 * dt * k1v, wm, fm)
    k3q, k3v, k3p = deriv(q0 + 0.5 * dt * k2q, v0 + 0.5 * dt * k2v, wm, fm)
    k4q, k4v, k4p = deriv(q0 + dt * k3q, v0 + dt * k3v, w1, f1)

    out = state.copy()
    out.q_GI = quat_normalize(q0 + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q))
    out.v = v0 + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    out.p = p0 + dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
    return out


def continuous_jacobians(state: ImuState, omega_hat, f_hat):
    """Continuous-time error-state Jacobians F (21x21) and G (21x12).

    Nonzero blocks of F: d(dtheta)/d(dtheta) = -skew(omega_hat),
    d(dtheta)/d(dbg) = -I, d(dv)/d(dtheta) = -C^T skew(f_hat),
    d(dv)/d(dba) = -C^T, d(dp)/d(dv) = I, with C the global-to-IMU matrix.
    """
    C_T = quat_to_rot(state.q_GI).T
    F = np.zeros((IMU_ERR_DIM, IMU_ERR_DIM))
    F[ATT, ATT] = -skew(omega_hat)
    F[ATT, BG] = -np.eye(3)
    F[VEL, ATT] = -C_T @ skew(f_hat)
    F[VEL, BA] = -C_T
    F[POS, VEL] = np.eye(3)

    G = np.zeros((IMU_ERR_DIM, NOISE_DIM))
    G[ATT, 0:3] = -np.eye(3)
    G[VEL, 3:6] = -C_T
    G[BG, 6:9] = np.eye(3)
    G[BA, 9:12] = np.eye(3)
    return F, G


def discretize(F, G, noise: NoiseSpec, dt: float):
    """First-order state transition and trapezoidal discrete noise covariance."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    Phi = np.eye(IMU_ERR_DIM) + F * dt
    GQGt = G @ noise.Q() @ G.T
    Qd = (GQGt + Phi @ GQGt @ Phi.T) * (dt / 2.0)
    return Phi, 0.5 * (Qd + Qd.T)


def propagate_cov(P, Phi, Qd) -> np.ndarray:
    """Propagate an error covariance: Phi P Phi^T + Qd, re-symmetrized."""
    out = Phi @ P @ Phi.T + Qd
    return 0.5 * (out + out.T)
