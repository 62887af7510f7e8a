"""Rotation and pose algebra.

Quaternions are Hamilton, stored scalar-last as [x, y, z, w]. A rotation
stored on a pose maps vectors from the body frame into the global frame.

Attitude errors post-multiply the estimate: R = R_hat * dR(delta). The
small rotation dR is built from the quaternion [delta/2, 1] and renormalized,
which makes apply/extract an exact inverse pair (the extracted error is the
Gibbs vector 2*vec/w of the relative quaternion).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def quat_multiply(a, b) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    # canonical sign keeps serialization deterministic
    if q[3] < 0:
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
        [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
        [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
             (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s,
             (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s,
             (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
             0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(q)


def exp_so3(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / angle ** 2
    return np.eye(3) + a * K + b * K @ K


def quat_from_rotvec(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    if angle < 1e-8:
        q = np.array([0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2], 1.0])
    else:
        axis = phi / angle
        q = np.append(np.sin(angle / 2) * axis, np.cos(angle / 2))
    return quat_normalize(q)


def quat_to_rotvec(q) -> np.ndarray:
    q = quat_normalize(q)
    vec = q[:3]
    s = np.linalg.norm(vec)
    if s < 1e-12:
        return 2.0 * vec
    angle = 2.0 * np.arctan2(s, q[3])
    return angle * vec / s


def log_so3(R) -> np.ndarray:
    return quat_to_rotvec(matrix_to_quat(R))


def right_jacobian(phi) -> np.ndarray:
    """Right Jacobian of the SO(3) exponential."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(angle)) / angle ** 2
    b = (angle - np.sin(angle)) / angle ** 3
    return np.eye(3) - a * K + b * K @ K


def skew_batch(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -v[..., 2], v[..., 1]
    K[..., 1, 0], K[..., 1, 2] = v[..., 2], -v[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -v[..., 1], v[..., 0]
    return K


def _rodrigues_coefficients(angle):
    """sin(x)/x, (1-cos x)/x^2, (x-sin x)/x^3 with series near zero."""
    small = angle < 1e-3
    x = np.where(small, 1.0, angle)
    x2 = angle * angle
    a = np.where(small, 1.0 - x2 / 6.0 + x2 * x2 / 120.0, np.sin(x) / x)
    b = np.where(small, 0.5 - x2 / 24.0 + x2 * x2 / 720.0, (1.0 - np.cos(x)) / x ** 2)
    c = np.where(small, 1.0 / 6.0 - x2 / 120.0 + x2 * x2 / 5040.0, (x - np.sin(x)) / x ** 3)
    return a, b, c


def exp_so3_batch(phi) -> np.ndarray:
    """exp_so3 over the leading axis of an (N, 3) array."""
    phi = np.asarray(phi, dtype=float)
    a, b, _ = _rodrigues_coefficients(np.linalg.norm(phi, axis=-1))
    K = skew_batch(phi)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def right_jacobian_batch(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    _, b, c = _rodrigues_coefficients(np.linalg.norm(phi, axis=-1))
    K = skew_batch(phi)
    return np.eye(3) - b[:, None, None] * K + c[:, None, None] * (K @ K)


def small_rotation_quat(delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    return quat_normalize(np.array([0.5 * delta[0], 0.5 * delta[1], 0.5 * delta[2], 1.0]))


def small_rotation_matrix(delta) -> np.ndarray:
    return quat_to_matrix(small_rotation_quat(delta))


def small_rotation_right_jacobian(delta) -> np.ndarray:
    """d(error) of small_rotation(delta + d) relative to small_rotation(delta).

    small_rotation(delta + d) = small_rotation(delta) * small_rotation(J d) + O(d^2)
    """
    delta = np.asarray(delta, dtype=float)
    return (np.eye(3) - 0.5 * skew(delta)) / (1.0 + 0.25 * delta @ delta)


class Rotation:
    __slots__ = ("q", "_R")

    def __init__(self, q):
        self.q = quat_normalize(q)
        self._R = None

    @classmethod
    def identity(cls) -> "Rotation":
        return cls([0.0, 0.0, 0.0, 1.0])

    @classmethod
    def from_matrix(cls, R) -> "Rotation":
        return cls(matrix_to_quat(R))

    @classmethod
    def from_rotvec(cls, phi) -> "Rotation":
        return cls(quat_from_rotvec(phi))

    @classmethod
    def from_yaw(cls, yaw: float) -> "Rotation":
        return cls.from_rotvec([0.0, 0.0, yaw])

    @property
    def matrix(self) -> np.ndarray:
        if self._R is None:
            self._R = quat_to_matrix(self.q)
        return self._R

    def inverse(self) -> "Rotation":
        return Rotation(quat_conjugate(self.q))

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.q, other.q))

    def apply(self, v) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def as_rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.q)

    def angle(self) -> float:
        return float(2.0 * np.arctan2(np.linalg.norm(self.q[:3]), abs(self.q[3])))

    def euler_zyx(self):
        """(yaw, pitch, roll) for R = Rz(yaw) Ry(pitch) Rx(roll)."""
        R = self.matrix
        pitch = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
        roll = np.arctan2(R[2, 1], R[2, 2])
        yaw = np.arctan2(R[1, 0], R[0, 0])
        return yaw, pitch, roll

    def __repr__(self):
        return f"Rotation(q={self.q.tolist()})"


@dataclass(frozen=True)
class AttitudeError:
    delta_theta: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _delta_array(delta) -> np.ndarray:
    if isinstance(delta, AttitudeError):
        delta = delta.delta_theta
    return np.asarray(delta, dtype=float)


def apply_attitude_error(R_hat: Rotation, delta) -> Rotation:
    return Rotation(quat_multiply(R_hat.q, small_rotation_quat(_delta_array(delta))))


def extract_attitude_error(R_hat: Rotation, R: Rotation) -> np.ndarray:
    qe = quat_multiply(quat_conjugate(R_hat.q), R.q)
    return 2.0 * qe[:3] / qe[3]


def attitude_error_jacobians(R_hat: Rotation, R: Rotation):
    """Jacobians of extract_attitude_error(R_hat, R) w.r.t. right perturbations.

    Returns (d/d R_hat, d/d R), both 3x3.
    """
    g = 0.5 * extract_attitude_error(R_hat, R)
    K = skew(g)
    gg = np.outer(g, g)
    d_hat = -(np.eye(3) - K + gg)
    d_r = np.eye(3) + K + gg
    return d_hat, d_r


@dataclass
class Pose:
    rotation: Rotation
    position: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @property
    def R(self) -> np.ndarray:
        return self.rotation.matrix

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation * other.rotation, self.position + self.R @ other.position)

    def inverse(self) -> "Pose":
        Rinv = self.rotation.inverse()
        return Pose(Rinv, -(Rinv.matrix @ self.position))

    def transform_point(self, p) -> np.ndarray:
        return self.R @ np.asarray(p, dtype=float) + self.position

    def copy(self) -> "Pose":
        return Pose(Rotation(self.rotation.q.copy()), self.position.copy())


def boxplus(pose: Pose, delta) -> Pose:
    delta = np.asarray(delta, dtype=float)
    return Pose(apply_attitude_error(pose.rotation, delta[:3]), pose.position + delta[3:6])


def boxminus(a: Pose, b: Pose) -> np.ndarray:
    """Error of a relative to b: boxplus(b, boxminus(a, b)) == a."""
    return np.concatenate([extract_attitude_error(b.rotation, a.rotation), a.position - b.position])


def slerp(r0: Rotation, r1: Rotation, fraction: float) -> Rotation:
    rel = quat_multiply(quat_conjugate(r0.q), r1.q)
    step = quat_from_rotvec(fraction * quat_to_rotvec(rel))
    return Rotation(quat_multiply(r0.q, step))


def interpolate_pose(p0: Pose, p1: Pose, fraction: float) -> Pose:
    return Pose(slerp(p0.rotation, p1.rotation, fraction),
                (1.0 - fraction) * p0.position + fraction * p1.position)
