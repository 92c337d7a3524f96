"""Quaternion and rotation-matrix algebra for the error-state filter.

Conventions used across the package:

* Quaternions are stored scalar-last, ``q = [x, y, z, w]``.
* A quaternion ``q_A_B`` encodes the frame rotation from frame A to
  frame B, and ``quat_to_rot(q_A_B)`` is the matrix ``C_A_B`` that maps
  coordinates: ``v_B = C_A_B @ v_A``.
* Multiplication composes frame rotations so that
  ``quat_to_rot(quat_mul(a, b)) == quat_to_rot(a) @ quat_to_rot(b)``.
* Small attitude errors ``dtheta`` enter on the left:
  ``q = small_angle_quat(dtheta) * q_hat``, which corresponds to
  ``C = (I - skew(dtheta)) @ C_hat`` to first order.

Under these conventions the body-rate kinematics is
``q_dot = 0.5 * omega_matrix(w) @ q`` with ``w`` the angular rate in
the destination (body) frame.
"""

from __future__ import annotations

import numpy as np

_QUAT_NORM_EPS = 1e-12


def skew(v) -> np.ndarray:
    """Return the 3x3 skew-symmetric matrix with ``skew(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def quat_identity() -> np.ndarray:
    """Identity quaternion [0, 0, 0, 1]."""
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_normalize(q) -> np.ndarray:
    """Rescale to unit norm. Falls back to identity for a near-zero input."""
    q = np.asarray(q, dtype=float)
    n = np.sqrt(float(q @ q))
    if n < _QUAT_NORM_EPS:
        return quat_identity()
    if abs(n - 1.0) < _QUAT_NORM_EPS:
        # already unit: keep the input bits so no-op corrections are exact
        return q.copy()
    return q / n


def quat_conj(q) -> np.ndarray:
    """Conjugate (inverse for unit quaternions)."""
    q = np.asarray(q, dtype=float)
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_mul(a, b) -> np.ndarray:
    """Compose two frame rotations; result rotates by ``b`` first, then ``a``.

    Satisfies ``quat_to_rot(quat_mul(a, b)) == quat_to_rot(a) @ quat_to_rot(b)``.
    The result is renormalized.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    av, aw = a[:3], a[3]
    bv, bw = b[:3], b[3]
    v = aw * bv + bw * av - np.cross(av, bv)
    w = aw * bw - av @ bv
    return quat_normalize(np.array([v[0], v[1], v[2], w]))


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion (frame-rotation convention)."""
    q = np.asarray(q, dtype=float)
    v, w = q[:3], q[3]
    return (2.0 * w * w - 1.0) * np.eye(3) - 2.0 * w * skew(v) + 2.0 * np.outer(v, v)


def rot_to_quat(R) -> np.ndarray:
    """Quaternion of a rotation matrix, scalar part kept nonnegative."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    # Shepperd's method: branch on the largest of (tr, R00, R11, R22)
    # to keep the divisor well away from zero.
    if tr >= R[0, 0] and tr >= R[1, 1] and tr >= R[2, 2]:
        w = 0.5 * np.sqrt(1.0 + tr)
        x = (R[1, 2] - R[2, 1]) / (4.0 * w)
        y = (R[2, 0] - R[0, 2]) / (4.0 * w)
        z = (R[0, 1] - R[1, 0]) / (4.0 * w)
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        x = 0.5 * np.sqrt(1.0 + 2.0 * R[0, 0] - tr)
        w = (R[1, 2] - R[2, 1]) / (4.0 * x)
        y = (R[0, 1] + R[1, 0]) / (4.0 * x)
        z = (R[0, 2] + R[2, 0]) / (4.0 * x)
    elif R[1, 1] >= R[2, 2]:
        y = 0.5 * np.sqrt(1.0 + 2.0 * R[1, 1] - tr)
        w = (R[2, 0] - R[0, 2]) / (4.0 * y)
        x = (R[0, 1] + R[1, 0]) / (4.0 * y)
        z = (R[1, 2] + R[2, 1]) / (4.0 * y)
    else:
        z = 0.5 * np.sqrt(1.0 + 2.0 * R[2, 2] - tr)
        w = (R[0, 1] - R[1, 0]) / (4.0 * z)
        x = (R[0, 2] + R[2, 0]) / (4.0 * z)
        y = (R[1, 2] + R[2, 1]) / (4.0 * z)
    q = quat_normalize(np.array([x, y, z, w]))
    if q[3] < 0.0:
        q = -q
    return q


def small_angle_quat(dtheta) -> np.ndarray:
    """First-order quaternion for a small rotation-vector error, normalized."""
    dtheta = np.asarray(dtheta, dtype=float)
    return quat_normalize(
        np.array([0.5 * dtheta[0], 0.5 * dtheta[1], 0.5 * dtheta[2], 1.0])
    )


def correct_quat(qhat, dtheta) -> np.ndarray:
    """Inject an attitude error on the left: ``small_angle_quat(dtheta) * qhat``."""
    return quat_mul(small_angle_quat(dtheta), qhat)


def quat_error_vec(q, qhat) -> np.ndarray:
    """Rotation-vector error ``dtheta`` with ``q ~= correct_quat(qhat, dtheta)``.

    Exact for any pair of unit quaternions (uses the full log map, not the
    first-order half-angle approximation).
    """
    dq = quat_mul(q, quat_conj(qhat))
    if dq[3] < 0.0:
        dq = -dq
    vnorm = np.sqrt(float(dq[:3] @ dq[:3]))
    angle = 2.0 * np.arctan2(vnorm, dq[3])
    if vnorm < _QUAT_NORM_EPS:
        return 2.0 * dq[:3]
    return dq[:3] * (angle / vnorm)


def quat_angle(q) -> float:
    """Rotation angle of a unit quaternion, in [0, pi] rad."""
    q = np.asarray(q, dtype=float)
    vnorm = np.sqrt(float(q[:3] @ q[:3]))
    return 2.0 * np.arctan2(vnorm, abs(q[3]))


def omega_matrix(w) -> np.ndarray:
    """4x4 rate matrix for the quaternion kinematics ``q_dot = 0.5 * Omega(w) @ q``."""
    w = np.asarray(w, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = -skew(w)
    out[:3, 3] = w
    out[3, :3] = -w
    return out


def is_unit_quat(q, tol: float = 1e-9) -> bool:
    """True if the quaternion norm is within ``tol`` of 1."""
    q = np.asarray(q, dtype=float)
    return abs(float(np.sqrt(q @ q)) - 1.0) <= tol


def is_rotation(R, tol: float = 1e-9) -> bool:
    """True if ``R`` is orthonormal with determinant +1 within ``tol``."""
    R = np.asarray(R, dtype=float)
    return (
        np.abs(R @ R.T - np.eye(3)).max() <= tol
        and abs(float(np.linalg.det(R)) - 1.0) <= tol
    )
