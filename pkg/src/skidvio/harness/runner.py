"""Simulate a scenario into a measurement log and run the estimator over a log."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import SolverDivergedError, StreamMissingError
from ..estimator.window import SlidingWindowEstimator
from ..geom import Pose, Rotation
from ..kinematics import EncoderReading, KinematicParams, body_velocity_array, ideal_params, initialize_track_width
from ..simulate import (NOMINAL_FOCAL_PX, XiSchedule, generate_trajectory, scatter_landmarks,
                        synthesize_encoders, synthesize_features, synthesize_imu)
from . import metrics
from .config import ScenarioConfig
from .logio import MeasurementLog, rig_to_dict

XI_INIT_STREAM = 7
XI_WALK_STREAM = 8
TRACK_WIDTH_WINDOW = 5.0     # seconds of encoder/gyro data used for the track-width initializer


@dataclass
class SimulationData:
    trajectory: object
    log: MeasurementLog
    landmarks: list
    schedule: XiSchedule


@dataclass
class KeyframeRow:
    t: float
    quat: np.ndarray
    position: np.ndarray
    xi: np.ndarray
    xi_std: np.ndarray


@dataclass
class RunResult:
    mode: str
    seed: int
    xi_initial: np.ndarray
    keyframes: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    diverged: bool = False
    last_good_keyframe: int = None
    message: str = ""
    timing: dict = field(default_factory=dict)

    def arrays(self):
        t = np.array([k.t for k in self.keyframes])
        q = np.array([k.quat for k in self.keyframes])
        p = np.array([k.position for k in self.keyframes])
        xi = np.array([k.xi for k in self.keyframes])
        std = np.array([k.xi_std for k in self.keyframes])
        return t, q, p, xi, std

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "mode": self.mode,
            "seed": self.seed,
            "xi_initial": [float(x) for x in self.xi_initial],
            "diverged": self.diverged,
            "last_good_keyframe": self.last_good_keyframe,
            "message": self.message,
            "metrics": self.metrics,
            "keyframes": [{"t": k.t, "quaternion": k.quat.tolist(), "position": k.position.tolist(),
                           "xi": k.xi.tolist(), "xi_std": k.xi_std.tolist()} for k in self.keyframes],
        }
        if include_timing:
            out["timing"] = self.timing
        return out


def _schedule(cfg: ScenarioConfig, t_end: float, seed: int) -> XiSchedule:
    if cfg.xi_walk_sigma > 0:
        return XiSchedule.random_walk(cfg.xi_true, cfg.xi_walk_sigma, t_end, 0.1, [int(seed), XI_WALK_STREAM])
    return XiSchedule.constant(cfg.xi_true)


def _trim(arr, t_max):
    return arr[arr[:, 0] <= t_max + 1e-9]


def simulate_scenario(cfg: ScenarioConfig, seed: int) -> SimulationData:
    profile = cfg.motion_profile()
    sched = _schedule(cfg, profile.duration, seed)
    traj = generate_trajectory(profile, sched, cfg.dt)
    noise = None if cfg.noise_free else cfg.noise
    count = max(1, int(round(cfg.landmarks_per_meter * traj.path_length())))
    landmarks = scatter_landmarks(traj, count, cfg.corridor_width, seed)
    enc = synthesize_encoders(traj, sched, noise, cfg.encoder_rate, seed=seed, as_array=True)
    imu = synthesize_imu(traj, cfg.rig, noise, cfg.imu_rate, bias_walk_seed=seed, as_array=True)
    feats = synthesize_features(traj, landmarks, cfg.rig, noise, cfg.camera_rate, seed=seed, as_frames=True)
    gt = np.column_stack([traj.t, traj.quats, traj.positions, traj.velocities])
    gtx = np.column_stack([sched.times, sched.values])
    if cfg.duration is not None:
        t_max = float(cfg.duration)
        enc, imu, gt = _trim(enc, t_max), _trim(imu, t_max), _trim(gt, t_max)
        keep = feats.frame_t <= t_max + 1e-9
        feats = type(feats)(feats.frame_t[keep], feats.frame_id[keep], feats.landmark_id[keep], feats.uv[keep])
        gtx = gtx[(gtx[:, 0] <= t_max + 1e-9) | (np.arange(len(gtx)) == 0)]
    header = {
        "profile": profile.name,
        "seed": int(seed),
        "dt": cfg.dt,
        "rates": {"encoder": cfg.encoder_rate, "imu": cfg.imu_rate, "camera": cfg.camera_rate},
        "rig": rig_to_dict(cfg.rig),
        "manifold": list(profile.manifold.m),
        "noise": None if noise is None else {k: v for k, v in dataclasses.asdict(noise).items()},
        "pixel_noise": None if noise is None else {"focal_px": NOMINAL_FOCAL_PX,
                                                   "sigma_px": noise.sigma_pixel * NOMINAL_FOCAL_PX},
        "xi_true": [float(x) for x in cfg.xi_true.as_array()],
        "landmark_count": count,
    }
    log = MeasurementLog(header, enc, imu, feats, gt, gtx)
    return SimulationData(traj, log, landmarks, sched)


def initial_xi(cfg: ScenarioConfig, seed: int, log: MeasurementLog = None) -> np.ndarray:
    if cfg.xi_initial == "explicit":
        return np.asarray(cfg.xi_initial_value, dtype=float)
    if cfg.xi_initial == "track-width":
        if log is None or log.imu is None:
            raise StreamMissingError("track-width initialization needs encoder and IMU streams")
        t0 = log.encoders[0, 0]
        enc = log.encoders[log.encoders[:, 0] <= t0 + TRACK_WIDTH_WINDOW]
        # gyro yaw about the odometer z axis, resampled at the encoder times
        gyro_O = log.imu[:, 1:4] @ log.rig().extrinsics_OI.R.T
        yaw = np.interp(enc[:, 0], log.imu[:, 0], gyro_O[:, 2])
        b = initialize_track_width([EncoderReading(*r) for r in enc], yaw)
        return ideal_params(b).as_array()
    rng = np.random.default_rng([int(seed), XI_INIT_STREAM])
    xi0 = cfg.xi_true.as_array() + np.asarray(cfg.xi_initial_offset) + rng.normal(0.0, cfg.xi_initial_std, 5)
    return KinematicParams.from_array(xi0).check().as_array()


def _initial_pose(log: MeasurementLog, t0: float) -> Pose:
    if not log.has_ground_truth():
        return Pose.identity()
    g = log.ground_truth
    q, p = metrics.interpolate_truth(g[:, 0], g[:, 1:5], g[:, 5:8], [t0])
    return Pose(Rotation(q[0]), p[0])


def _initial_speed_bias(log: MeasurementLog, pose0: Pose, xi0, t0: float, rig) -> np.ndarray:
    """Global IMU velocity from the first encoder reading through the initial xi; zero biases."""
    k = int(np.clip(np.searchsorted(log.encoders[:, 0], t0), 0, len(log.encoders) - 1))
    v_x, v_y, w = body_velocity_array(xi0, log.encoders[k, 1], log.encoders[k, 2])
    v_O = np.array([v_x, v_y, 0.0]) + np.cross([0.0, 0.0, w], rig.extrinsics_OI.position)
    return np.concatenate([pose0.R @ v_O, np.zeros(6)])


def run_log(log: MeasurementLog, cfg: ScenarioConfig, seed: int = None, xi0=None) -> RunResult:
    """Run the estimator over a measurement log in the configured mode."""
    seed = int(log.header.get("seed", 0) if seed is None else seed)
    est_cfg = cfg.estimator
    if log.features is None or len(log.features) == 0:
        raise StreamMissingError("log has no feature stream (FEA)")
    if est_cfg.use_imu and log.imu is None:
        raise StreamMissingError(f"mode {cfg.mode} needs an IMU stream")
    rig = log.rig()
    xi0 = initial_xi(cfg, seed, log) if xi0 is None else np.asarray(xi0, dtype=float)
    result = RunResult(cfg.mode, seed, xi0)
    feats = log.features
    times = np.unique(feats.frame_t)
    if cfg.duration is not None:
        times = times[times <= float(cfg.duration) + 1e-9]
    est = SlidingWindowEstimator(est_cfg, rig, cfg.noise, log.encoders, log.imu if est_cfg.use_imu else None)
    t0 = float(times[0])
    pose0 = _initial_pose(log, t0)
    bounds = np.searchsorted(feats.frame_t, times, side="left")
    ends = np.searchsorted(feats.frame_t, times, side="right")
    tic = time.perf_counter()
    est.initialize(t0, pose0, xi0, _initial_speed_bias(log, pose0, xi0, t0, rig), None,
                   feats.landmark_id[bounds[0]:ends[0]], feats.uv[bounds[0]:ends[0]])
    try:
        for t, a, b in zip(times[1:], bounds[1:], ends[1:]):
            est.process_frame(float(t), feats.landmark_id[a:b], feats.uv[a:b])
    except SolverDivergedError as exc:
        result.diverged = True
        result.last_good_keyframe = est.records[-1].index if est.records else None
        result.message = str(exc)
    result.timing = {"seconds": time.perf_counter() - tic, "keyframes": len(est.records)}
    result.keyframes = [KeyframeRow(r.t, r.pose.rotation.q.copy(), r.pose.position.copy(), np.asarray(r.xi).copy(),
                                    np.asarray(r.xi_std).copy()) for r in est.records]
    if log.has_ground_truth() and len(result.keyframes) >= 2:
        result.metrics = evaluate(result, log)
    return result


def evaluate(result: RunResult, log: MeasurementLog, rpe_lengths=None) -> dict:
    t, q, p, xi, _ = result.arrays()
    g = log.ground_truth
    args = (t, q, p, g[:, 0], g[:, 1:5], g[:, 5:8])
    out = {"final_drift": metrics.final_drift(*args), "ate": metrics.ate(*args)}
    lengths = rpe_lengths or sorted(set(metrics.RPE_LENGTHS_SHORT) | set(metrics.RPE_LENGTHS_LONG))
    out["rpe"] = {("%g" % L): v for L, v in metrics.rpe(*args, lengths=lengths).items()}
    if log.xi_schedule is not None:
        truth = log.schedule().at_array(t)
        err = xi - truth
        second = t >= t[0] + 0.5 * (t[-1] - t[0])
        out["xi_error_second_half"] = [float(x) for x in err[second].mean(axis=0)]
        out["xi_error_final"] = [float(x) for x in err[-1]]
    return out


def run_scenario(cfg: ScenarioConfig, seed: int = None, keep_data: bool = False):
    seed = cfg.seeds[0] if seed is None else seed
    data = simulate_scenario(cfg, seed)
    result = run_log(data.log, cfg, seed)
    return (result, data) if keep_data else result


def keyframe_csv(result: RunResult) -> str:
    """Flat per-keyframe table for plotting."""
    cols = ["t", "qx", "qy", "qz", "qw", "px", "py", "pz", "X_v", "Y_l", "Y_r", "alpha_l", "alpha_r",
            "std_X_v", "std_Y_l", "std_Y_r", "std_alpha_l", "std_alpha_r"]
    lines = [",".join(cols)]
    for k in result.keyframes:
        row = np.concatenate([[k.t], k.quat, k.position, k.xi, k.xi_std])
        lines.append(",".join("%.17g" % x for x in row))
    return "\n".join(lines) + "\n"
