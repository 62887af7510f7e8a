"""Residual blocks for the sliding-window problem.

Variables are addressed by keys: ("pose", i), ("sb", i), ("xi", i), ("m", i)
and ("lm", j). Pose errors are [dtheta, dp]; the other blocks are vectors.
Every factor returns its residual and one Jacobian per connected key, taken
w.r.t. the error state of that key.
"""
from __future__ import annotations

import numpy as np

from ..errors import NegativeDepthError
from ..geom import Pose, attitude_error_jacobians, extract_attitude_error, skew
from ..kinematics import KinematicParams
from ..propagation import (OdometryState, PropagationResult, imu_factor_jacobians,
                           imu_factor_residual, odometry_factor_jacobians,
                           odometry_factor_residual)
from ..simulate import ManifoldParams, manifold_gradient, manifold_value

DIMS = {"pose": 6, "sb": 9, "xi": 5, "m": 6, "lm": 3}
MIN_DEPTH = 0.01


def key_dim(key) -> int:
    return DIMS[key[0]]


def sqrt_information(info: np.ndarray) -> np.ndarray:
    """W with W^T W = info (rows with zero information are dropped)."""
    info = 0.5 * (info + info.T)
    w, V = np.linalg.eigh(info)
    keep = w > 1e-14 * max(w.max(), 1e-300)
    return (np.sqrt(w[keep])[:, None] * V[:, keep].T)


def retract(key, value, delta):
    if key[0] == "pose":
        from ..geom import boxplus
        return boxplus(value, delta)
    return value + delta


def local(key, value, ref):
    if key[0] == "pose":
        return np.concatenate([extract_attitude_error(ref.rotation, value.rotation), value.position - ref.position])
    return value - ref


def local_jacobian(key, value, ref) -> np.ndarray:
    """d local(value, ref) / d error(value)."""
    if key[0] == "pose":
        D = np.eye(6)
        D[0:3, 0:3] = attitude_error_jacobians(ref.rotation, value.rotation)[1]
        return D
    return np.eye(key_dim(key))


class Factor:
    kind = "generic"

    def __init__(self, keys, information):
        self.keys = tuple(keys)
        self.information = np.asarray(information, dtype=float)
        self.sqrt_info = sqrt_information(self.information)

    def evaluate(self, values):
        """(residual, [jacobian per key])."""
        raise NotImplementedError

    def residual(self, values):
        return self.evaluate(values)[0]

    @property
    def dim(self):
        return self.information.shape[0]


class PriorFactor(Factor):
    """Gaussian prior 0.5 |J (x - x_lin) + r0|^2 over selected error dimensions."""
    kind = "prior"

    def __init__(self, keys, lin_values, dims, sqrt_j, r0):
        self.keys = tuple(keys)
        self.lin = {k: lin_values[k] for k in keys}
        self.dims = {k: np.asarray(dims[k], dtype=int) for k in keys}
        self.sqrt_j = np.asarray(sqrt_j, dtype=float)
        self.r0 = np.asarray(r0, dtype=float)
        self.sqrt_info = np.eye(len(self.r0))
        self.information = self.sqrt_info

    @classmethod
    def from_information(cls, keys, lin_values, dims, info, grad):
        # Jacobi scaling first: the information spans many orders of magnitude
        info = 0.5 * (info + info.T)
        d = np.sqrt(np.maximum(np.diag(info), 1e-300))
        w, V = np.linalg.eigh(info / d[:, None] / d[None, :])
        keep = w > 1e-12 * max(w.max(), 1e-300)
        sq = np.sqrt(w[keep])
        J = (sq[:, None] * V[:, keep].T) * d[None, :]
        r0 = (V[:, keep].T @ (grad / d)) / sq
        return cls(keys, lin_values, dims, J, r0)

    @classmethod
    def diagonal(cls, keys, lin_values, dims, stds):
        stds = np.concatenate([np.asarray(s, dtype=float) for s in stds])
        J = np.diag(1.0 / stds)
        return cls(keys, lin_values, dims, J, np.zeros(len(stds)))

    def residual(self, values):
        return self.evaluate(values, with_jacobians=False)[0]

    def information_matrix(self):
        return self.sqrt_j.T @ self.sqrt_j

    def gradient_vector(self):
        return self.sqrt_j.T @ self.r0

    def evaluate(self, values, with_jacobians=True):
        deltas = []
        jac_blocks = []
        for k in self.keys:
            d = self.dims[k]
            deltas.append(local(k, values[k], self.lin[k])[d])
            if with_jacobians:
                jac_blocks.append(local_jacobian(k, values[k], self.lin[k])[d])
        delta = np.concatenate(deltas) if deltas else np.zeros(0)
        r = self.sqrt_j @ delta + self.r0
        if not with_jacobians:
            return r, None
        jacs = []
        col = 0
        for k, D in zip(self.keys, jac_blocks):
            n = D.shape[0]
            jacs.append(self.sqrt_j[:, col:col + n] @ D)
            col += n
        return r, jacs

    @property
    def dim(self):
        return len(self.r0)


class OdometryFactor(Factor):
    kind = "odometer"

    def __init__(self, keys, prop: PropagationResult):
        super().__init__(keys, prop.noise_information)
        self.prop = prop

    def evaluate(self, values):
        pk0, xk0, pk1, xk1 = self.keys
        s0 = OdometryState(values[pk0], KinematicParams.from_array(values[xk0]))
        s1 = OdometryState(values[pk1], KinematicParams.from_array(values[xk1]))
        r = odometry_factor_residual(s1, s0, self.prop)
        J0, J1 = odometry_factor_jacobians(s1, s0, self.prop)
        return r, [J0[:, 0:6], J0[:, 6:11], J1[:, 0:6], J1[:, 6:11]]

    def residual(self, values):
        pk0, xk0, pk1, xk1 = self.keys
        s0 = OdometryState(values[pk0], KinematicParams.from_array(values[xk0]))
        s1 = OdometryState(values[pk1], KinematicParams.from_array(values[xk1]))
        return odometry_factor_residual(s1, s0, self.prop)


class ImuFactor(Factor):
    kind = "imu"

    def __init__(self, keys, preint, gravity, extrinsics_OI: Pose):
        super().__init__(keys, preint.information())
        self.preint = preint
        self.gravity = np.asarray(gravity, dtype=float)
        self.extrinsics_OI = extrinsics_OI

    def evaluate(self, values):
        pk0, sb0, pk1, sb1 = self.keys
        args = (values[pk1], values[pk0], values[sb1], values[sb0], self.preint, self.gravity, self.extrinsics_OI)
        r = imu_factor_residual(*args)
        J_p0, J_s0, J_p1, J_s1 = imu_factor_jacobians(*args)
        return r, [J_p0, J_s0, J_p1, J_s1]

    def residual(self, values):
        pk0, sb0, pk1, sb1 = self.keys
        return imu_factor_residual(values[pk1], values[pk0], values[sb1], values[sb0], self.preint, self.gravity,
                                   self.extrinsics_OI)


def manifold_residual(pose: Pose, m, m_prev=None) -> np.ndarray:
    """[m - m_prev (6, omitted without m_prev); m_p(p) (1); m_r (2)]."""
    m = m.as_array() if isinstance(m, ManifoldParams) else np.asarray(m, dtype=float)
    p = pose.position
    grad = manifold_gradient(m, p)
    n = pose.R[:, 2]
    rot = np.cross(n, grad)[:2]
    out = [np.array([manifold_value(m, p)]), rot]
    if m_prev is not None:
        m_prev = m_prev.as_array() if isinstance(m_prev, ManifoldParams) else np.asarray(m_prev, dtype=float)
        out.insert(0, m - m_prev)
    return np.concatenate(out)


def manifold_jacobians(pose: Pose, m, with_prev: bool = True):
    """(d/d pose [6], d/d m [6], d/d m_prev [6] or None) for manifold_residual."""
    m = m.as_array() if isinstance(m, ManifoldParams) else np.asarray(m, dtype=float)
    a1, a2, a3 = m[:3]
    x, y, _ = pose.position
    grad = manifold_gradient(m, pose.position)
    R = pose.R
    n = R[:, 2]
    off = 6 if with_prev else 0
    rows = off + 3
    J_pose = np.zeros((rows, 6))
    J_m = np.zeros((rows, 6))
    J_pose[off, 3:6] = grad
    J_m[off] = [0.5 * x * x, x * y, 0.5 * y * y, x, y, 1.0]
    e3 = np.array([0.0, 0.0, 1.0])
    J_pose[off + 1:off + 3, 0:3] = (skew(grad) @ R @ skew(e3))[:2]
    dgrad_dp = np.array([[a1, a2, 0.0], [a2, a3, 0.0], [0.0, 0.0, 0.0]])
    J_pose[off + 1:off + 3, 3:6] = (skew(n) @ dgrad_dp)[:2]
    dgrad_dm = np.array([[x, y, 0.0, 1.0, 0.0, 0.0], [0.0, x, y, 0.0, 1.0, 0.0], [0.0] * 6])
    J_m[off + 1:off + 3] = (skew(n) @ dgrad_dm)[:2]
    J_prev = None
    if with_prev:
        J_m[0:6] = np.eye(6)
        J_prev = np.zeros((rows, 6))
        J_prev[0:6] = -np.eye(6)
    return J_pose, J_m, J_prev


class ManifoldFactor(Factor):
    kind = "manifold"

    def __init__(self, keys, weights):
        """keys = (pose, m, m_prev) or (pose, m); weights are 9 (or the last 3) diagonal informations."""
        weights = np.asarray(weights, dtype=float)
        if len(keys) == 2 and len(weights) == 9:
            weights = weights[6:]
        super().__init__(keys, np.diag(weights))

    def evaluate(self, values):
        pose = values[self.keys[0]]
        m = values[self.keys[1]]
        with_prev = len(self.keys) == 3
        r = manifold_residual(pose, m, values[self.keys[2]] if with_prev else None)
        J_pose, J_m, J_prev = manifold_jacobians(pose, m, with_prev)
        jacs = [J_pose, J_m] + ([J_prev] if with_prev else [])
        return r, jacs

    def residual(self, values):
        with_prev = len(self.keys) == 3
        return manifold_residual(values[self.keys[0]], values[self.keys[1]],
                                 values[self.keys[2]] if with_prev else None)


def camera_frame(pose: Pose, extrinsics_OC: Pose):
    R_O = pose.R
    return R_O @ extrinsics_OC.R, pose.position + R_O @ extrinsics_OC.position


def visual_residual(pose_i: Pose, landmark, obs, rig) -> np.ndarray:
    """Observed minus predicted normalized image coordinates."""
    p_f = landmark.position if hasattr(landmark, "position") else np.asarray(landmark, dtype=float)
    uv = obs.uv if hasattr(obs, "uv") else np.asarray(obs, dtype=float)
    R_C, p_C = camera_frame(pose_i, rig.extrinsics_OC)
    pc = R_C.T @ (np.asarray(p_f, dtype=float) - p_C)
    if pc[2] <= MIN_DEPTH:
        raise NegativeDepthError(f"landmark depth {pc[2]:.3g} m is not in front of the camera")
    return np.asarray(uv, dtype=float) - pc[:2] / pc[2]


def visual_batch(R_O, p_O, p_f, uv, extrinsics_OC: Pose, with_jacobians: bool = True):
    """Vectorized residuals for N observations.

    R_O (N,3,3), p_O (N,3): odometer poses; p_f (N,3): landmarks; uv (N,2).
    Returns r (N,2), J_pose (N,2,6), J_lm (N,2,3), depth (N,).
    """
    R_OC = extrinsics_OC.R
    p_OC = extrinsics_OC.position
    d = p_f - p_O                                       # (N,3)
    local_o = np.einsum("nji,nj->ni", R_O, d)           # R_O^T d
    pc = (local_o - p_OC) @ R_OC                         # R_OC^T (R_O^T d - p_OC)
    z = pc[:, 2]
    zs = np.where(np.abs(z) > 1e-12, z, 1e-12)
    r = uv - pc[:, :2] / zs[:, None]
    if not with_jacobians:
        return r, None, None, z
    n = len(z)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = 1.0 / zs
    dpi[:, 1, 1] = 1.0 / zs
    dpi[:, 0, 2] = -pc[:, 0] / zs ** 2
    dpi[:, 1, 2] = -pc[:, 1] / zs ** 2
    A = -dpi @ R_OC.T                                   # d r / d local_o, (N,2,3)
    J_lm = np.einsum("nij,nkj->nik", A, R_O)            # A R_O^T
    sk = np.zeros((n, 3, 3))
    sk[:, 0, 1] = -local_o[:, 2]
    sk[:, 0, 2] = local_o[:, 1]
    sk[:, 1, 0] = local_o[:, 2]
    sk[:, 1, 2] = -local_o[:, 0]
    sk[:, 2, 0] = -local_o[:, 1]
    sk[:, 2, 1] = local_o[:, 0]
    J_pose = np.empty((n, 2, 6))
    J_pose[:, :, 0:3] = A @ sk
    J_pose[:, :, 3:6] = -J_lm
    return r, J_pose, J_lm, z


def visual_jacobians(pose_i: Pose, landmark_position, uv, rig):
    R_O = pose_i.R[None]
    r, J_pose, J_lm, _ = visual_batch(R_O, pose_i.position[None], np.asarray(landmark_position, dtype=float)[None],
                                      np.asarray(uv, dtype=float)[None], rig.extrinsics_OC)
    return J_pose[0], J_lm[0]


class VisualFactor(Factor):
    """One observation; the solver evaluates these in vectorized batches."""
    kind = "visual"

    def __init__(self, pose_key, lm_key, uv, sigma_pixel, extrinsics_OC: Pose):
        self.keys = (pose_key, lm_key)
        self.uv = np.asarray(uv, dtype=float)
        self.sigma = float(sigma_pixel)
        self.information = np.eye(2) / self.sigma ** 2
        self.sqrt_info = np.eye(2) / self.sigma
        self.extrinsics_OC = extrinsics_OC

    def evaluate(self, values):
        pose = values[self.keys[0]]
        p_f = values[self.keys[1]]
        r, J_pose, J_lm, _ = visual_batch(pose.R[None], pose.position[None], p_f[None], self.uv[None],
                                          self.extrinsics_OC)
        return r[0], [J_pose[0], J_lm[0]]
