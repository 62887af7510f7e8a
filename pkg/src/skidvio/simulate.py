"""Synthetic ground truth and sensor streams for a skid-steer robot.

The planar path is integrated from the kinematic velocity (v_x, -X_v*omega,
omega) with the same constant-twist step the odometry propagation uses,
then lifted onto a quadratic ground surface.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .errors import ManifoldGradientError
from .geom import Pose, Rotation
from .kinematics import BodyVelocity, EncoderReading, KinematicParams
from .propagation import ImuReading, NoiseConfig, _twist_integrals

NOMINAL_FOCAL_PX = 460.0
GRAVITY = np.array([0.0, 0.0, -9.81])
MAX_MANIFOLD_GRADIENT = 10.0


@dataclass(frozen=True)
class ManifoldParams:
    """Ground surface m_p(p) = 0.5 p_xy^T A p_xy + b^T p_xy + p_z + c with A = [[a1, a2], [a2, a3]]."""
    m: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(float(v) for v in np.asarray(self.m, dtype=float).reshape(6)))

    @classmethod
    def flat(cls, height: float = 0.0) -> "ManifoldParams":
        return cls((0.0, 0.0, 0.0, 0.0, 0.0, -height))

    def as_array(self) -> np.ndarray:
        return np.array(self.m)

    @property
    def A(self) -> np.ndarray:
        a1, a2, a3 = self.m[:3]
        return np.array([[a1, a2], [a2, a3]])

    @property
    def b(self) -> np.ndarray:
        return np.array(self.m[3:5])

    def value(self, p) -> float:
        return manifold_value(self.as_array(), p)

    def gradient(self, p) -> np.ndarray:
        return manifold_gradient(self.as_array(), p)

    def height(self, x, y):
        a1, a2, a3, b1, b2, c = self.m
        return -(0.5 * (a1 * x * x + 2 * a2 * x * y + a3 * y * y) + b1 * x + b2 * y + c)


def manifold_value(m, p) -> float:
    a1, a2, a3, b1, b2, c = m
    x, y, z = p
    return 0.5 * (a1 * x * x + 2 * a2 * x * y + a3 * y * y) + b1 * x + b2 * y + z + c


def manifold_gradient(m, p) -> np.ndarray:
    a1, a2, a3, b1, b2, _ = m
    x, y = p[0], p[1]
    return np.array([a1 * x + a2 * y + b1, a2 * x + a3 * y + b2, 1.0])


def surface_rotation(m: ManifoldParams, x: float, y: float, yaw: float) -> np.ndarray:
    g = m.gradient([x, y, 0.0])[:2]
    h = np.array([np.cos(yaw), np.sin(yaw)])
    x_b = np.array([h[0], h[1], -g @ h])
    x_b /= np.linalg.norm(x_b)
    n = np.array([g[0], g[1], 1.0])
    n /= np.linalg.norm(n)
    y_b = np.cross(n, x_b)
    return np.column_stack([x_b, y_b, n])


@dataclass(frozen=True)
class Segment:
    duration: float
    v_x: float
    omega_z: float
    ramp: float = 0.0


@dataclass
class MotionProfile:
    segments: Sequence[Segment]
    manifold: ManifoldParams = field(default_factory=ManifoldParams)
    name: str = "custom"

    def __post_init__(self):
        self.segments = [s if isinstance(s, Segment) else Segment(*s) for s in self.segments]
        if not self.segments:
            raise ValueError("profile needs at least one segment")
        for s in self.segments:
            if s.duration <= 0 or s.ramp < 0 or s.ramp > s.duration:
                raise ValueError(f"invalid segment {s}")

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def command(self, t):
        """(v_x, omega_z) at time(s) t; linear ramps blend from the previous segment."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        v = np.empty_like(t)
        w = np.empty_like(t)
        starts = np.cumsum([0.0] + [s.duration for s in self.segments])
        idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(self.segments) - 1)
        for k in np.unique(idx):
            sel = idx == k
            seg = self.segments[k]
            tau = t[sel] - starts[k]
            if k > 0 and seg.ramp > 0:
                prev = self.segments[k - 1]
                f = np.clip(tau / seg.ramp, 0.0, 1.0)
                v[sel] = prev.v_x + f * (seg.v_x - prev.v_x)
                w[sel] = prev.omega_z + f * (seg.omega_z - prev.omega_z)
            else:
                v[sel] = seg.v_x
                w[sel] = seg.omega_z
        return v, w

    def path_length(self) -> float:
        total = 0.0
        prev_v = None
        for k, s in enumerate(self.segments):
            if k > 0 and s.ramp > 0:
                total += 0.5 * (abs(prev_v) + abs(s.v_x)) * s.ramp + abs(s.v_x) * (s.duration - s.ramp)
            else:
                total += abs(s.v_x) * s.duration
            prev_v = s.v_x
        return total


class XiSchedule:
    """Piecewise-constant kinematic parameters over time."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float).reshape(-1)
        self.values = np.asarray(values, dtype=float).reshape(-1, 5)

    @classmethod
    def constant(cls, xi) -> "XiSchedule":
        arr = xi.as_array() if isinstance(xi, KinematicParams) else np.asarray(xi, dtype=float)
        return cls([0.0], [arr])

    @classmethod
    def random_walk(cls, xi0, sigma, t_end: float, dt: float, seed: int) -> "XiSchedule":
        arr = xi0.as_array() if isinstance(xi0, KinematicParams) else np.asarray(xi0, dtype=float)
        rng = np.random.default_rng(seed)
        n = int(round(t_end / dt)) + 1
        steps = rng.standard_normal((n - 1, 5)) * np.asarray(sigma) * np.sqrt(dt)
        vals = np.vstack([arr, arr + np.cumsum(steps, axis=0)])
        return cls(np.arange(n) * dt, vals)

    def at_array(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        idx = np.clip(np.searchsorted(self.times, t + 1e-12, side="right") - 1, 0, len(self.times) - 1)
        return self.values[idx]

    def at(self, t: float) -> KinematicParams:
        return KinematicParams.from_array(self.at_array(t)[0])


def as_schedule(xi) -> XiSchedule:
    if isinstance(xi, XiSchedule):
        return xi
    return XiSchedule.constant(xi)


class TrajectorySample(NamedTuple):
    t: float
    pose: Pose
    velocity: BodyVelocity


class Trajectory:
    """Sampled ground truth; indexable as a sequence of TrajectorySample."""

    def __init__(self, t, quats, positions, velocities, dt, manifold=None):
        self.t = np.asarray(t, dtype=float)
        self.quats = np.asarray(quats, dtype=float)
        self.positions = np.asarray(positions, dtype=float)
        self.velocities = np.asarray(velocities, dtype=float)
        self.dt = float(dt)
        self.manifold = manifold

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k):
        return TrajectorySample(float(self.t[k]), self.pose(k), BodyVelocity(*self.velocities[k]))

    def pose(self, k) -> Pose:
        return Pose(Rotation(self.quats[k]), self.positions[k].copy())

    def rotation_matrices(self) -> np.ndarray:
        return _batch_matrices(self.quats)

    def index_of(self, t: float) -> int:
        k = int(np.searchsorted(self.t, t - 1e-9))
        if k >= len(self.t) or abs(self.t[k] - t) > 1e-9:
            raise ValueError(f"time {t} is not on the trajectory grid")
        return k

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))


def _batch_quats(R: np.ndarray) -> np.ndarray:
    q = ScipyRotation.from_matrix(R).as_quat()
    q[q[:, 3] < 0] *= -1.0
    return q


def _batch_matrices(quats: np.ndarray) -> np.ndarray:
    return ScipyRotation.from_quat(quats).as_matrix()


def generate_trajectory(profile: MotionProfile, xi_true, dt: float, start: Pose = None) -> Trajectory:
    if not 0 < dt <= 0.02:
        raise ValueError("dt must lie in (0, 0.02]")
    sched = as_schedule(xi_true)
    n = int(np.floor(profile.duration / dt + 1e-9))
    t = np.arange(n + 1) * dt
    if profile.duration - t[-1] > 1e-9:
        # short closing step so the path ends exactly at the profile duration
        t = np.append(t, profile.duration)
    v_x, omega = profile.command(t)
    X_v = sched.at_array(t)[:, 0]
    v_y = -X_v * omega

    x0, y0, yaw0 = 0.0, 0.0, 0.0
    if start is not None:
        x0, y0 = start.position[:2]
        yaw0 = start.rotation.euler_zyx()[0]
    count = len(t)
    xs = np.empty(count)
    ys = np.empty(count)
    yaws = np.empty(count)
    x, y, yaw = x0, y0, yaw0
    for k in range(count):
        xs[k], ys[k], yaws[k] = x, y, yaw
        if k == count - 1:
            break
        h = t[k + 1] - t[k]
        wb = 0.5 * (omega[k] + omega[k + 1])
        i0, _ = _twist_integrals(wb, h)
        step = complex(np.cos(yaw), np.sin(yaw)) * i0 * complex(0.5 * (v_x[k] + v_x[k + 1]),
                                                                 0.5 * (v_y[k] + v_y[k + 1]))
        x += step.real
        y += step.imag
        yaw += wb * h

    m = profile.manifold
    a1, a2, a3, b1, b2, _ = m.m
    gx = a1 * xs + a2 * ys + b1
    gy = a2 * xs + a3 * ys + b2
    if np.max(np.sqrt(gx * gx + gy * gy + 1.0)) > MAX_MANIFOLD_GRADIENT:
        raise ManifoldGradientError("surface gradient exceeds 10 along the path")
    zs = m.height(xs, ys)
    hx, hy = np.cos(yaws), np.sin(yaws)
    x_b = np.column_stack([hx, hy, -(gx * hx + gy * hy)])
    x_b /= np.linalg.norm(x_b, axis=1, keepdims=True)
    nrm = np.column_stack([gx, gy, np.ones(count)])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    y_b = np.cross(nrm, x_b)
    R = np.stack([x_b, y_b, nrm], axis=2)
    positions = np.column_stack([xs, ys, zs])
    velocities = np.column_stack([v_x, v_y, omega])
    return Trajectory(t, _batch_quats(R), positions, velocities, dt, m)


def _rng(seed, stream: int):
    return np.random.default_rng([int(seed), stream])


def _subsample(traj: Trajectory, rate: float) -> np.ndarray:
    step = int(round(1.0 / (rate * traj.dt)))
    if step < 1 or abs(step * traj.dt * rate - 1.0) > 1e-9:
        raise ValueError(f"rate {rate} Hz is not a divisor of the trajectory rate")
    idx = np.arange(0, len(traj), step)
    on_grid = np.abs(traj.t[idx] - idx * traj.dt) < 1e-9
    return idx[on_grid]


def synthesize_encoders(traj: Trajectory, xi_schedule, noise: NoiseConfig = None, rate: float = 100.0,
                        seed: int = 0, as_array: bool = False):
    sched = as_schedule(xi_schedule)
    idx = _subsample(traj, rate)
    t = traj.t[idx]
    xi = sched.at_array(t)
    v = traj.velocities[idx, 0]
    w = traj.velocities[idx, 2]
    o_l = (v - xi[:, 1] * w) / xi[:, 3]
    o_r = (v - xi[:, 2] * w) / xi[:, 4]
    if noise is not None:
        rng = _rng(seed, 1)
        n = rng.standard_normal((len(t), 2)) * noise.sigma_encoder
        o_l = o_l + n[:, 0]
        o_r = o_r + n[:, 1]
    data = np.column_stack([t, o_l, o_r])
    if as_array:
        return data
    return [EncoderReading(*row) for row in data.tolist()]


def imu_frame_track(traj: Trajectory, rig: "SensorRig"):
    R_O = traj.rotation_matrices()
    R_I = R_O @ rig.extrinsics_OI.R
    p_I = traj.positions + R_O @ rig.extrinsics_OI.position
    return R_I, p_I


def synthesize_imu(traj: Trajectory, rig: "SensorRig", noise: NoiseConfig = None, rate: float = 200.0,
                   bias_walk_seed: int = 0, initial_bias=None, as_array: bool = False,
                   return_bias: bool = False):
    """Gyro and specific force in the IMU frame from central differences of the truth."""
    R_I, p_I = imu_frame_track(traj, rig)
    n = len(traj)
    gyro = np.zeros((n, 3))
    acc_g = np.zeros((n, 3))
    t_all = traj.t
    if n >= 3:
        lo = np.maximum(np.arange(n) - 1, 0)
        hi = np.minimum(np.arange(n) + 1, n - 1)
        rel = np.einsum("nji,njk->nik", R_I[lo], R_I[hi])
        gyro = ScipyRotation.from_matrix(rel).as_rotvec() / (t_all[hi] - t_all[lo])[:, None]
        h1 = (t_all[1:-1] - t_all[:-2])[:, None]
        h2 = (t_all[2:] - t_all[1:-1])[:, None]
        acc_g[1:-1] = 2.0 * ((p_I[2:] - p_I[1:-1]) / h2 - (p_I[1:-1] - p_I[:-2]) / h1) / (h1 + h2)
        acc_g[0] = acc_g[1]
        acc_g[-1] = acc_g[-2]
    g = np.asarray(rig.gravity, dtype=float)
    spec = np.einsum("nji,nj->ni", R_I, acc_g - g)

    idx = _subsample(traj, rate)
    t = traj.t[idx]
    gyro = gyro[idx]
    spec = spec[idx]
    bias = np.zeros((len(idx), 6))
    if initial_bias is not None:
        bias[:] = np.asarray(initial_bias, dtype=float)
    if noise is not None:
        rng = _rng(bias_walk_seed, 2)
        step = 1.0 / rate
        walk = rng.standard_normal((len(idx), 6))
        walk[0] = 0.0
        walk[:, :3] *= noise.sigma_accel_bias_walk * np.sqrt(step)
        walk[:, 3:] *= noise.sigma_gyro_bias_walk * np.sqrt(step)
        bias = bias + np.cumsum(walk, axis=0)
        white = rng.standard_normal((len(idx), 6))
        spec = spec + bias[:, :3] + white[:, :3] * noise.sigma_accel
        gyro = gyro + bias[:, 3:] + white[:, 3:] * noise.sigma_gyro
    else:
        spec = spec + bias[:, :3]
        gyro = gyro + bias[:, 3:]
    data = np.column_stack([t, gyro, spec])
    out = data if as_array else [ImuReading(r[0], r[1:4].copy(), r[4:7].copy()) for r in data]
    if return_bias:
        return out, bias
    return out


@dataclass
class SensorRig:
    extrinsics_OC: Pose = field(default_factory=lambda: Pose(
        Rotation.from_matrix(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])),
        np.array([0.25, 0.0, 0.4])))
    extrinsics_OI: Pose = field(default_factory=lambda: Pose(Rotation.identity(), np.array([0.0, 0.0, 0.15])))
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    fov_half_angle: float = np.deg2rad(50.0)
    max_range: float = 25.0
    min_depth: float = 0.3


class Landmark(NamedTuple):
    id: int
    position: np.ndarray


class FeatureObservation(NamedTuple):
    frame_t: float
    landmark_id: int
    uv: np.ndarray


@dataclass
class FeatureFrames:
    """Columnar feature observations: one row per (frame, landmark)."""
    frame_t: np.ndarray
    frame_id: np.ndarray
    landmark_id: np.ndarray
    uv: np.ndarray

    def __len__(self):
        return len(self.frame_t)

    def observations(self):
        return [FeatureObservation(float(t), int(l), uv.copy())
                for t, l, uv in zip(self.frame_t, self.landmark_id, self.uv)]


def camera_poses(traj: Trajectory, rig: SensorRig, idx):
    R_O = _batch_matrices(traj.quats[idx])
    R_C = R_O @ rig.extrinsics_OC.R
    p_C = traj.positions[idx] + R_O @ rig.extrinsics_OC.position
    return R_C, p_C


def synthesize_features(traj: Trajectory, landmarks: Sequence[Landmark], rig: SensorRig,
                        noise: NoiseConfig = None, frame_rate: float = 10.0, seed: int = 0,
                        as_frames: bool = False):
    if len(landmarks) == 0:
        raise ValueError("no landmarks to observe")
    ids = np.array([lm.id for lm in landmarks])
    pts = np.array([lm.position for lm in landmarks], dtype=float)
    idx = _subsample(traj, frame_rate)
    R_C, p_C = camera_poses(traj, rig, idx)
    rng = _rng(seed, 3)
    cos_fov = np.cos(rig.fov_half_angle)
    cols = {"t": [], "f": [], "l": [], "uv": []}
    for fi, k in enumerate(idx):
        pc = (pts - p_C[fi]) @ R_C[fi]
        depth = pc[:, 2]
        dist = np.linalg.norm(pc, axis=1)
        keep = (depth > rig.min_depth) & (dist <= rig.max_range) & (depth >= cos_fov * dist)
        if not np.any(keep):
            continue
        uv = pc[keep, :2] / depth[keep, None]
        if noise is not None:
            uv = uv + rng.standard_normal(uv.shape) * noise.sigma_pixel
        cols["t"].append(np.full(keep.sum(), traj.t[k]))
        cols["f"].append(np.full(keep.sum(), fi))
        cols["l"].append(ids[keep])
        cols["uv"].append(uv)
    frames = FeatureFrames(np.concatenate(cols["t"]), np.concatenate(cols["f"]).astype(int),
                           np.concatenate(cols["l"]).astype(int), np.vstack(cols["uv"]))
    return frames if as_frames else frames.observations()


def scatter_landmarks(traj: Trajectory, count: int, corridor_width: float, seed: int,
                      height_range=(0.2, 3.0)) -> list:
    if count <= 0:
        raise ValueError("count must be positive")
    rng = _rng(seed, 4)
    seg = np.linalg.norm(np.diff(traj.positions[:, :2], axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        # stationary robot: scatter in a disc around the start
        ang = rng.uniform(0, 2 * np.pi, count)
        rad = 0.5 * corridor_width * np.sqrt(rng.uniform(0, 1, count))
        xy = traj.positions[0, :2] + np.column_stack([np.cos(ang), np.sin(ang)]) * rad[:, None]
    else:
        along = rng.uniform(0.0, s[-1], count)
        lateral = rng.uniform(-0.5 * corridor_width, 0.5 * corridor_width, count)
        k = np.clip(np.searchsorted(s, along, side="right") - 1, 0, len(seg) - 1)
        frac = np.where(seg[k] > 0, (along - s[k]) / np.where(seg[k] > 0, seg[k], 1.0), 0.0)
        base = traj.positions[k, :2] + frac[:, None] * (traj.positions[k + 1, :2] - traj.positions[k, :2])
        tangent = traj.positions[k + 1, :2] - traj.positions[k, :2]
        norm = np.linalg.norm(tangent, axis=1, keepdims=True)
        yaw = np.array([Rotation(q).euler_zyx()[0] for q in traj.quats[k]])
        fallback = np.column_stack([np.cos(yaw), np.sin(yaw)])
        tangent = np.where(norm > 1e-12, tangent / np.where(norm > 1e-12, norm, 1.0), fallback)
        normal = np.column_stack([-tangent[:, 1], tangent[:, 0]])
        xy = base + lateral[:, None] * normal
    height = rng.uniform(height_range[0], height_range[1], count)
    m = traj.manifold or ManifoldParams()
    z = m.height(xy[:, 0], xy[:, 1]) + height
    return [Landmark(i, np.array([xy[i, 0], xy[i, 1], z[i]])) for i in range(count)]


# ---------------------------------------------------------------- profiles

def _random_profile(seed: int, target_length: float, manifold=None, name="custom") -> MotionProfile:
    rng = np.random.default_rng(seed)
    segs = [Segment(3.0, 0.8, 0.0)]
    length = 2.4
    while length < target_length:
        dur = float(rng.uniform(3.0, 7.0))
        v = float(rng.uniform(0.6, 1.4))
        w = 0.0 if rng.uniform() < 0.3 else float(rng.uniform(-0.5, 0.5))
        cand = Segment(round(dur, 3), round(v, 3), round(w, 3), 1.0)
        ramp_length = 0.5 * (abs(segs[-1].v_x) + abs(cand.v_x)) * cand.ramp
        if target_length - length <= ramp_length:
            # too little left for another ramp: stretch the current segment instead
            last = segs[-1]
            segs[-1] = Segment(last.duration + (target_length - length) / abs(last.v_x), last.v_x,
                               last.omega_z, last.ramp)
            return MotionProfile(segs, manifold or ManifoldParams(), name)
        segs.append(cand)
        length = MotionProfile(segs).path_length()
    # trim the last segment so the path length hits the target
    last = segs[-1]
    excess = length - target_length
    segs[-1] = Segment(last.duration - excess / last.v_x, last.v_x, last.omega_z, last.ramp)
    return MotionProfile(segs, manifold or ManifoldParams(), name)


def _wheel_profile(pairs, xi: KinematicParams, ramp: float, name: str) -> MotionProfile:
    from .kinematics import forward_kinematics
    segs = []
    for k, (dur, o_l, o_r) in enumerate(pairs):
        bv = forward_kinematics(xi, o_l, o_r)
        segs.append(Segment(dur, bv.v_x, bv.omega_z, ramp if k > 0 else 0.0))
    return MotionProfile(segs, ManifoldParams(), name)


DEFAULT_XI = KinematicParams(0.04, 0.32, -0.30, 0.93, 0.95)

BUNDLED_PROFILES = ("long-205m", "general-motion", "straight-line", "constant-circle", "spin",
                    "zero-left", "zero-right", "proportional-wheels", "omega-proportional-left")


def bundled_profile(name: str, xi: KinematicParams = None) -> MotionProfile:
    xi = xi or DEFAULT_XI
    if name == "long-205m":
        return _random_profile(2054, 205.4, name=name)
    if name == "general-motion":
        return _random_profile(7, 100.0, name=name)
    if name == "straight-line":
        return MotionProfile([Segment(4.0, 0.6, 0.0), Segment(6.0, 1.2, 0.0, 2.0), Segment(5.0, 0.8, 0.0, 2.0)],
                             name=name)
    if name == "constant-circle":
        return MotionProfile([Segment(4 * np.pi, 1.0, 0.5)], name=name)
    if name == "spin":
        return MotionProfile([Segment(3.0, 0.0, 0.8), Segment(3.0, 0.0, -0.6, 1.0)], name=name)
    if name == "zero-left":
        return _wheel_profile([(4.0, 0.0, 0.6), (4.0, 0.0, 1.2), (4.0, 0.0, 0.9)], xi, 2.0, name)
    if name == "zero-right":
        return _wheel_profile([(4.0, 0.6, 0.0), (4.0, 1.2, 0.0), (4.0, 0.9, 0.0)], xi, 2.0, name)
    if name in ("proportional-wheels", "omega-proportional-left"):
        return _wheel_profile([(4.0, 0.5, 0.8), (4.0, 1.0, 1.6), (4.0, 0.7, 1.12)], xi, 2.0, name)
    raise KeyError(f"unknown bundled profile {name!r}")
