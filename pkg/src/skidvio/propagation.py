"""Wheel-odometry dead reckoning and IMU preintegration.

Odometry error state order: [dtheta(3), dp(3), dxi(5)]. Rotation errors are
right perturbations (see geom), position errors are global and additive.

IMU preintegration error order: [dtheta, dp, dv, dba, dbg].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import MeasurementGapError, TooFewSamplesError
from .geom import (Pose, Rotation, apply_attitude_error, attitude_error_jacobians,
                   exp_so3_batch, extract_attitude_error, right_jacobian_batch, skew, skew_batch,
                   small_rotation_right_jacobian)
from .kinematics import KinematicParams, body_velocity_array, jacobians

MAX_GAP = 0.5
INFO_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseConfig:
    sigma_encoder: float = 0.0245
    sigma_xi_walk: tuple = (1e-3, 1e-3, 1e-3, 1e-3, 1e-3)
    sigma_gyro: float = 9e-4
    sigma_accel: float = 1e-2
    sigma_gyro_bias_walk: float = 1e-2
    sigma_accel_bias_walk: float = 1e-2
    sigma_pixel: float = 0.6 / 460.0
    # roll/pitch rate (rad/s) and vertical speed (m/s) slack for the planar odometry model
    sigma_nonplanar: tuple = (1e-2, 1e-2)

    def __post_init__(self):
        object.__setattr__(self, "sigma_xi_walk", tuple(float(s) for s in np.broadcast_to(self.sigma_xi_walk, 5)))
        object.__setattr__(self, "sigma_nonplanar", tuple(float(s) for s in np.broadcast_to(self.sigma_nonplanar, 2)))
        scalars = [self.sigma_encoder, self.sigma_gyro, self.sigma_accel, self.sigma_gyro_bias_walk,
                   self.sigma_accel_bias_walk, self.sigma_pixel]
        if min(scalars) <= 0 or min(self.sigma_xi_walk) <= 0:
            raise ValueError("noise standard deviations must be strictly positive")
        if min(self.sigma_nonplanar) < 0:
            raise ValueError("sigma_nonplanar must be non-negative")

    def scaled(self, factor: float) -> "NoiseConfig":
        return NoiseConfig(
            sigma_encoder=self.sigma_encoder * factor,
            sigma_xi_walk=tuple(s * factor for s in self.sigma_xi_walk),
            sigma_gyro=self.sigma_gyro * factor,
            sigma_accel=self.sigma_accel * factor,
            sigma_gyro_bias_walk=self.sigma_gyro_bias_walk * factor,
            sigma_accel_bias_walk=self.sigma_accel_bias_walk * factor,
            sigma_pixel=self.sigma_pixel * factor,
            sigma_nonplanar=tuple(s * factor for s in self.sigma_nonplanar),
        )


@dataclass
class OdometryState:
    pose: Pose
    xi: KinematicParams


@dataclass
class PropagationResult:
    predicted: OdometryState
    jacobian_wrt_prev: np.ndarray
    noise_information: np.ndarray
    prev: OdometryState = None
    covariance: np.ndarray = None
    duration: float = 0.0


class ImuReading(NamedTuple):
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class ImuPreintegration:
    delta_rotation: Rotation
    delta_velocity: np.ndarray
    delta_position: np.ndarray
    bias_linearization_point: np.ndarray
    covariance: np.ndarray
    duration: float
    # d[dtheta, dp, dv] / d[ba, bg]
    bias_jacobian: np.ndarray = field(default_factory=lambda: np.zeros((9, 6)))

    def information(self) -> np.ndarray:
        return regularized_inverse(self.covariance)


def regularized_inverse(cov: np.ndarray, floor: float = INFO_FLOOR) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w, V = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    info = (V / w) @ V.T
    return 0.5 * (info + info.T)


def encoder_array(measurements) -> np.ndarray:
    if isinstance(measurements, np.ndarray):
        return measurements.reshape(-1, 3)
    return np.array([[m.t, m.o_l, m.o_r] for m in measurements], dtype=float).reshape(-1, 3)


def imu_array(measurements) -> np.ndarray:
    if isinstance(measurements, np.ndarray):
        return measurements.reshape(-1, 7)
    return np.array([[m.t, *m.gyro, *m.accel] for m in measurements], dtype=float).reshape(-1, 7)


def resample_interval(data: np.ndarray, t_start: float, t_end: float, max_gap: float = MAX_GAP) -> np.ndarray:
    """Rows of a time-stamped array restricted to [t_start, t_end].

    The endpoints are linearly interpolated when they fall between samples.
    """
    t = data[:, 0]
    if len(t) == 0 or t[0] > t_start + 1e-12 or t[-1] < t_end - 1e-12:
        raise MeasurementGapError(f"measurements do not cover [{t_start}, {t_end}]")
    lo = int(np.searchsorted(t, t_start, side="right"))
    hi = int(np.searchsorted(t, t_end, side="left"))
    rows = []

    def at(time):
        k = int(np.searchsorted(t, time))
        if k < len(t) and abs(t[k] - time) <= 1e-12:
            return data[k].copy()
        k = min(max(k, 1), len(t) - 1)
        frac = (time - t[k - 1]) / (t[k] - t[k - 1])
        row = (1.0 - frac) * data[k - 1] + frac * data[k]
        row[0] = time
        return row

    rows.append(at(t_start))
    inner = data[lo:hi]
    inner = inner[(inner[:, 0] > t_start + 1e-12) & (inner[:, 0] < t_end - 1e-12)]
    if len(inner):
        rows.extend(inner)
    if t_end > t_start:
        rows.append(at(t_end))
    out = np.array(rows)
    if len(out) > 1 and np.max(np.diff(out[:, 0])) > max_gap:
        raise MeasurementGapError(f"gap of {np.max(np.diff(out[:, 0])):.3f} s exceeds {max_gap} s")
    return out


def _twist_integrals(omega: float, dt: float):
    """Integrals over [0, dt] of exp(i w t) and t exp(i w t)."""
    x = omega * dt
    if abs(x) < 1e-3:
        i0 = dt * complex(1.0 - x * x / 6.0 + x ** 4 / 120.0, x / 2.0 - x ** 3 / 24.0)
        i1 = dt * dt * complex(0.5 - x * x / 8.0 + x ** 4 / 144.0, x / 3.0 - x ** 3 / 30.0)
        return i0, i1
    e = complex(np.cos(x), np.sin(x))
    i0 = (e - 1.0) / (1j * omega)
    i1 = e * (dt / (1j * omega) + 1.0 / omega ** 2) - 1.0 / omega ** 2
    return i0, i1


def _rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def propagate_odometry(prev: OdometryState, measurements, t_start: float, t_end: float,
                       noise: NoiseConfig) -> PropagationResult:
    """Integrate wheel speeds from t_start to t_end starting at prev.

    Each step averages the wheel speeds at its two ends and integrates the
    resulting constant body twist exactly. The transition Jacobian is the
    exact derivative of this discrete map.
    """
    if t_end < t_start:
        raise ValueError("t_end must not precede t_start")
    xi = prev.xi.check()
    xi_arr = xi.as_array()
    if t_end == t_start:
        cov = np.zeros((11, 11))
        return PropagationResult(OdometryState(prev.pose.copy(), xi), np.eye(11),
                                 regularized_inverse(cov), prev, cov, 0.0)

    samples = resample_interval(encoder_array(measurements), t_start, t_end)
    R0 = prev.pose.R
    p = prev.pose.position.copy()
    yaw = 0.0
    Phi = np.eye(11)
    cov = np.zeros((11, 11))
    walk_var = np.array(noise.sigma_xi_walk) ** 2
    enc_var = noise.sigma_encoder ** 2
    np_rate, np_vz = noise.sigma_nonplanar

    for k in range(len(samples) - 1):
        dt = samples[k + 1, 0] - samples[k, 0]
        o_mid = 0.5 * (samples[k, 1:] + samples[k + 1, 1:])
        v_x, v_y, omega = body_velocity_array(xi_arr, o_mid[0], o_mid[1])
        J_vxi, J_vo, J_wxi, J_wo = jacobians(xi, o_mid[0], o_mid[1])
        i0, i1 = _twist_integrals(omega, dt)
        vc = complex(v_x, v_y)
        step = i0 * vc
        d_step = 1j * i1 * vc
        S = np.array([[i0.real, -i0.imag, 0.0], [i0.imag, i0.real, 0.0], [0.0, 0.0, dt]])
        dp_local = np.array([step.real, step.imag, 0.0])
        dS_v = np.array([d_step.real, d_step.imag, 0.0])

        R = R0 @ _rot_z(yaw)
        dR = _rot_z(omega * dt)

        F = np.eye(11)
        F[0:3, 0:3] = dR.T
        F[0:3, 6:11] = dt * J_wxi
        F[3:6, 0:3] = -R @ skew(dp_local)
        F[3:6, 6:11] = R @ (S @ J_vxi + np.outer(dS_v, J_wxi[2]))

        G = np.zeros((11, 10))
        G[0:3, 0:2] = dt * J_wo
        G[3:6, 0:2] = R @ (S @ J_vo + np.outer(dS_v, J_wo[2]))
        G[0, 2] = dt
        G[1, 3] = dt
        G[3:6, 4] = R[:, 2] * dt
        G[6:11, 5:10] = np.eye(5)
        q = np.concatenate([[enc_var, enc_var, np_rate ** 2, np_rate ** 2, np_vz ** 2], walk_var * dt])

        Phi = F @ Phi
        cov = F @ cov @ F.T + (G * q) @ G.T

        p = p + R @ dp_local
        yaw += omega * dt

    pose = Pose(Rotation.from_matrix(R0 @ _rot_z(yaw)), p)
    cov = 0.5 * (cov + cov.T)
    return PropagationResult(OdometryState(pose, xi), Phi, regularized_inverse(cov), prev, cov,
                             float(t_end - t_start))


def dead_reckon(pose: Pose, xi, measurements, t_start: float, t_end: float) -> Pose:
    """Pose-only version of propagate_odometry (same discrete map, no covariance)."""
    if t_end <= t_start:
        return pose.copy()
    samples = resample_interval(encoder_array(measurements), t_start, t_end)
    dt = np.diff(samples[:, 0])
    o_mid = 0.5 * (samples[1:, 1:] + samples[:-1, 1:])
    vel = body_velocity_array(KinematicParams.from_array(xi).check().as_array(), o_mid[:, 0], o_mid[:, 1])
    omega = vel[:, 2]
    x = omega * dt
    small = np.abs(x) < 1e-3
    w_safe = np.where(small, 1.0, omega)
    e = np.exp(1j * x)
    i0 = np.where(small, dt * (1.0 - x * x / 6.0 + x ** 4 / 120.0 + 1j * (x / 2.0 - x ** 3 / 24.0)),
                  (e - 1.0) / (1j * w_safe))
    yaw_before = np.concatenate([[0.0], np.cumsum(x)[:-1]])
    steps = np.exp(1j * yaw_before) * i0 * (vel[:, 0] + 1j * vel[:, 1])
    total = steps.sum()
    R0 = pose.R
    p = pose.position + R0 @ np.array([total.real, total.imag, 0.0])
    return Pose(Rotation.from_matrix(R0 @ _rot_z(float(x.sum()))), p)


def _odometry_prediction(state_km1: OdometryState, prop: PropagationResult):
    lin = prop.prev if prop.prev is not None else state_km1
    R_lin = lin.pose.R
    delta_R = Rotation.from_matrix(R_lin.T @ prop.predicted.pose.R)
    dp_local = R_lin.T @ (prop.predicted.pose.position - lin.pose.position)
    J_R = prop.jacobian_wrt_prev[0:3, 6:11]
    J_p = R_lin.T @ prop.jacobian_wrt_prev[3:6, 6:11]
    dxi = state_km1.xi.as_array() - lin.xi.as_array()
    phi = J_R @ dxi
    rel_rot = apply_attitude_error(delta_R, phi)
    rel_pos = dp_local + J_p @ dxi
    return rel_rot, rel_pos, J_R, J_p, phi


def odometry_factor_residual(state_k: OdometryState, state_km1: OdometryState,
                             prop: PropagationResult) -> np.ndarray:
    """state_k boxminus f(state_km1); the relative motion is corrected to first order in xi."""
    rel_rot, rel_pos, _, _, _ = _odometry_prediction(state_km1, prop)
    pred_rot = state_km1.pose.rotation * rel_rot
    pred_pos = state_km1.pose.position + state_km1.pose.R @ rel_pos
    return np.concatenate([
        extract_attitude_error(pred_rot, state_k.pose.rotation),
        state_k.pose.position - pred_pos,
        state_k.xi.as_array() - state_km1.xi.as_array(),
    ])


def odometry_factor_jacobians(state_k: OdometryState, state_km1: OdometryState, prop: PropagationResult):
    """(d r / d x_{k-1}, d r / d x_k), each 11x11 in [dtheta, dp, dxi] order."""
    rel_rot, rel_pos, J_R, J_p, phi = _odometry_prediction(state_km1, prop)
    pred_rot = state_km1.pose.rotation * rel_rot
    D_A, D_B = attitude_error_jacobians(pred_rot, state_k.pose.rotation)
    R_km1 = state_km1.pose.R
    J_prev = np.zeros((11, 11))
    J_prev[0:3, 0:3] = D_A @ rel_rot.matrix.T
    J_prev[0:3, 6:11] = D_A @ small_rotation_right_jacobian(phi) @ J_R
    J_prev[3:6, 0:3] = R_km1 @ skew(rel_pos)
    J_prev[3:6, 3:6] = -np.eye(3)
    J_prev[3:6, 6:11] = -R_km1 @ J_p
    J_prev[6:11, 6:11] = -np.eye(5)
    J_cur = np.zeros((11, 11))
    J_cur[0:3, 0:3] = D_B
    J_cur[3:6, 3:6] = np.eye(3)
    J_cur[6:11, 6:11] = np.eye(5)
    return J_prev, J_cur


def imu_preintegrate(measurements, bias, noise: NoiseConfig) -> ImuPreintegration:
    """Preintegrate gyro/accel between the first and last reading.

    bias = [b_a, b_g]. Midpoint scheme: averaged rates per step, velocity
    increment rotated by the half-step attitude.
    """
    data = imu_array(measurements)
    if len(data) < 2:
        raise TooFewSamplesError("IMU preintegration needs at least 2 readings")
    bias = np.asarray(bias, dtype=float).reshape(6)
    ba, bg = bias[:3], bias[3:]
    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    cov = np.zeros((15, 15))
    J = np.eye(15)
    ga, gg = noise.sigma_accel ** 2, noise.sigma_gyro ** 2
    wa, wg = noise.sigma_accel_bias_walk ** 2, noise.sigma_gyro_bias_walk ** 2
    I3 = np.eye(3)
    dts = np.diff(data[:, 0])
    w_all = 0.5 * (data[:-1, 1:4] + data[1:, 1:4]) - bg
    a_all = 0.5 * (data[:-1, 4:7] + data[1:, 4:7]) - ba
    E_all = exp_so3_batch(w_all * dts[:, None])
    M_all = exp_so3_batch(0.5 * w_all * dts[:, None])
    J1_all = right_jacobian_batch(w_all * dts[:, None])
    J2_all = right_jacobian_batch(0.5 * w_all * dts[:, None])
    Ma_all = np.einsum("nij,nj->ni", M_all, a_all)
    skew_Ma = skew_batch(Ma_all)
    skew_a = skew_batch(a_all)
    for k in range(len(dts)):
        dt = dts[k]
        a = a_all[k]
        RM = dR @ M_all[k]
        F = np.eye(15)
        F[0:3, 0:3] = E_all[k].T
        F[0:3, 12:15] = -J1_all[k] * dt
        F[3:6, 0:3] = -0.5 * dt * dt * dR @ skew_Ma[k]
        F[3:6, 6:9] = dt * I3
        F[3:6, 9:12] = -0.5 * dt * dt * RM
        RaJ = RM @ skew_a[k] @ J2_all[k]
        F[3:6, 12:15] = 0.25 * dt ** 3 * RaJ
        F[6:9, 0:3] = -dt * dR @ skew_Ma[k]
        F[6:9, 9:12] = -dt * RM
        F[6:9, 12:15] = 0.5 * dt * dt * RaJ
        G = np.zeros((15, 12))
        G[0:9, 0:3] = F[0:9, 9:12]
        G[0:9, 3:6] = F[0:9, 12:15]
        G[9:12, 6:9] = I3
        G[12:15, 9:12] = I3
        q = np.repeat([ga, gg, wa * dt, wg * dt], 3)
        J = F @ J
        cov = F @ cov @ F.T + (G * q) @ G.T

        RMa = RM @ a
        dp = dp + dv * dt + 0.5 * dt * dt * RMa
        dv = dv + dt * RMa
        dR = dR @ E_all[k]
    cov = 0.5 * (cov + cov.T)
    return ImuPreintegration(Rotation.from_matrix(dR), dv, dp, bias.copy(), cov,
                             float(data[-1, 0] - data[0, 0]), J[0:9, 9:15].copy())


def zero_preintegration(bias=None) -> ImuPreintegration:
    b = np.zeros(6) if bias is None else np.asarray(bias, dtype=float)
    return ImuPreintegration(Rotation.identity(), np.zeros(3), np.zeros(3), b, np.zeros((15, 15)), 0.0)


def _imu_frame(pose: Pose, extrinsics_OI: Pose):
    R_O = pose.R
    R = R_O @ extrinsics_OI.R
    p = pose.position + R_O @ extrinsics_OI.position
    return R, p


def _imu_terms(pose_k, pose_km1, sb_k, sb_km1, preint, gravity, extrinsics_OI):
    sb_k = np.asarray(sb_k, dtype=float)
    sb_km1 = np.asarray(sb_km1, dtype=float)
    R_i, p_i = _imu_frame(pose_km1, extrinsics_OI)
    R_j, p_j = _imu_frame(pose_k, extrinsics_OI)
    v_i, ba_i, bg_i = sb_km1[0:3], sb_km1[3:6], sb_km1[6:9]
    v_j, ba_j, bg_j = sb_k[0:3], sb_k[3:6], sb_k[6:9]
    db = np.concatenate([ba_i, bg_i]) - preint.bias_linearization_point
    Jb = preint.bias_jacobian
    phi = Jb[0:3] @ db
    rot_corr = apply_attitude_error(preint.delta_rotation, phi)
    T = preint.duration
    g = np.asarray(gravity, dtype=float)
    dp_meas = preint.delta_position + Jb[3:6] @ db
    dv_meas = preint.delta_velocity + Jb[6:9] @ db
    pos_term = R_i.T @ (p_j - p_i - v_i * T - 0.5 * g * T * T)
    vel_term = R_i.T @ (v_j - v_i - g * T)
    A = Rotation.from_matrix(R_i) * rot_corr
    B = Rotation.from_matrix(R_j)
    r = np.concatenate([
        extract_attitude_error(A, B),
        pos_term - dp_meas,
        vel_term - dv_meas,
        ba_j - ba_i,
        bg_j - bg_i,
    ])
    return r, dict(R_i=R_i, A=A, B=B, rot_corr=rot_corr, phi=phi, pos_term=pos_term,
                   vel_term=vel_term, T=T, Jb=Jb)


def imu_factor_residual(pose_k: Pose, pose_km1: Pose, speed_bias_k, speed_bias_km1,
                        preint: ImuPreintegration, gravity, extrinsics_OI: Pose) -> np.ndarray:
    """Residual [dtheta, dp, dv, dba, dbg]; speed_bias = [v (global, IMU), b_a, b_g]."""
    r, _ = _imu_terms(pose_k, pose_km1, speed_bias_k, speed_bias_km1, preint, gravity, extrinsics_OI)
    return r


def imu_factor_jacobians(pose_k: Pose, pose_km1: Pose, speed_bias_k, speed_bias_km1,
                         preint: ImuPreintegration, gravity, extrinsics_OI: Pose):
    """(d/d pose_km1 [6], d/d sb_km1 [9], d/d pose_k [6], d/d sb_k [9])."""
    _, c = _imu_terms(pose_k, pose_km1, speed_bias_k, speed_bias_km1, preint, gravity, extrinsics_OI)
    R_i, T, Jb = c["R_i"], c["T"], c["Jb"]
    D_A, D_B = attitude_error_jacobians(c["A"], c["B"])
    I3 = np.eye(3)

    # derivatives w.r.t. IMU-frame rotation/position errors
    J_ti = np.zeros((15, 3))
    J_pi = np.zeros((15, 3))
    J_tj = np.zeros((15, 3))
    J_pj = np.zeros((15, 3))
    J_ti[0:3] = D_A @ c["rot_corr"].matrix.T
    J_ti[3:6] = skew(c["pos_term"])
    J_ti[6:9] = skew(c["vel_term"])
    J_pi[3:6] = -R_i.T
    J_tj[0:3] = D_B
    J_pj[3:6] = R_i.T

    J_sbi = np.zeros((15, 9))
    J_sbi[3:6, 0:3] = -R_i.T * T
    J_sbi[6:9, 0:3] = -R_i.T
    Jr = small_rotation_right_jacobian(c["phi"])
    J_sbi[0:3, 3:9] = D_A @ Jr @ Jb[0:3]
    J_sbi[3:6, 3:9] = -Jb[3:6]
    J_sbi[6:9, 3:9] = -Jb[6:9]
    J_sbi[9:12, 3:6] = -I3
    J_sbi[12:15, 6:9] = -I3

    J_sbj = np.zeros((15, 9))
    J_sbj[6:9, 0:3] = R_i.T
    J_sbj[9:12, 3:6] = I3
    J_sbj[12:15, 6:9] = I3

    R_OI = extrinsics_OI.R
    p_OI = extrinsics_OI.position

    def chain(J_t, J_p, pose):
        out = np.zeros((15, 6))
        out[:, 0:3] = J_t @ R_OI.T - J_p @ pose.R @ skew(p_OI)
        out[:, 3:6] = J_p
        return out

    return chain(J_ti, J_pi, pose_km1), J_sbi, chain(J_tj, J_pj, pose_k), J_sbj
