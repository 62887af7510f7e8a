"""Keyframe-based sliding-window estimator with marginalization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geom import Pose
from ..kinematics import KinematicParams
from ..propagation import (NoiseConfig, OdometryState, dead_reckon, imu_preintegrate,
                           propagate_odometry, resample_interval)
from ..simulate import ManifoldParams, SensorRig
from .factors import (ImuFactor, ManifoldFactor, OdometryFactor, PriorFactor, VisualFactor,
                      key_dim, visual_batch)
from .solver import Layout, linearize, marginalize, reduce_landmarks, solve
from .triangulate import triangulate

XI_ALL = (True, True, True, True, True)
XI_ICR = (True, True, True, False, False)
XI_NONE = (False, False, False, False, False)


@dataclass
class EstimatorConfig:
    keyframe_translation_gate: float = 0.2
    keyframe_rotation_gate: float = float(np.deg2rad(3.0))
    window_size: int = 10
    max_iterations: int = 6
    initial_damping: float = 1e-4
    convergence_tol: float = 1e-3
    huber_threshold: float | None = 1.345
    use_imu: bool = True
    xi_free: tuple = XI_ALL
    use_manifold: bool = True
    # m-walk (6), m_p (1), m_r (2) diagonal information
    manifold_weights: tuple = (1e2,) * 6 + (1e4,) * 3
    first_pose_prior_std: float = 1e-6
    xi_prior_std: tuple = (0.1,) * 5
    velocity_prior_std: float = 0.1
    accel_bias_prior_std: float = 0.05
    gyro_bias_prior_std: float = 0.01
    manifold_prior_std: tuple = (0.1, 0.1, 0.1, 0.05, 0.05, 0.05)
    min_triangulation_baseline: float = 0.05
    record_factors: bool = False

    def __post_init__(self):
        if self.keyframe_translation_gate <= 0 or self.keyframe_rotation_gate <= 0:
            raise ValueError("keyframe gates must be positive")
        if self.window_size < 3:
            raise ValueError("window_size must be at least 3")
        self.xi_free = tuple(bool(x) for x in self.xi_free)
        if len(self.xi_free) != 5:
            raise ValueError("xi_free needs 5 flags")


def should_create_keyframe(last_kf_pose: Pose, predicted: Pose, cfg: EstimatorConfig) -> bool:
    dp = np.linalg.norm(predicted.position - last_kf_pose.position)
    angle = (last_kf_pose.rotation.inverse() * predicted.rotation).angle()
    return bool(dp > cfg.keyframe_translation_gate or angle > cfg.keyframe_rotation_gate)


@dataclass
class SlidingWindowState:
    keyframe_poses: dict
    imu_speed_bias: np.ndarray
    manifold: ManifoldParams
    xi: KinematicParams
    prior_information: np.ndarray
    prior_gradient: np.ndarray


@dataclass
class KeyframeRecord:
    index: int
    t: float
    pose: Pose
    xi: np.ndarray
    xi_std: np.ndarray
    speed_bias: np.ndarray
    manifold: np.ndarray
    iterations: int
    cost: float


@dataclass
class _Track:
    key: tuple
    obs: list = field(default_factory=list)      # (keyframe index, uv)


class SlidingWindowEstimator:
    """Feed frames with process_frame(); keyframes are created by the odometry gate."""

    def __init__(self, cfg: EstimatorConfig, rig: SensorRig, noise: NoiseConfig, encoders, imu=None):
        self.cfg = cfg
        self.rig = rig
        self.noise = noise
        self.encoders = np.asarray(encoders, dtype=float)
        self.imu = None if imu is None else np.asarray(imu, dtype=float)
        if cfg.use_imu and self.imu is None:
            raise ValueError("use_imu needs an IMU stream")
        self.values = {}
        self.factors = []
        self.prior = None
        self.kf_times = {}           # keyframe index -> t
        self.window = []             # keyframe indices with a pose in the window
        self.tracks = {}             # feature id -> _Track (landmark in the window)
        self.pending = {}            # feature id -> list of (keyframe index, uv)
        self.next_landmark = 0
        self.records = []
        self.all_factors = []
        self.initial_values = {}
        self.marginalized_values = {}
        self.k = -1

    # ----------------------------------------------------------- bookkeeping
    @property
    def initialized(self):
        return self.k >= 0

    def free_mask(self, key):
        if key[0] == "xi":
            return np.array(self.cfg.xi_free)
        return None

    def _free_dims(self, key):
        mask = self.free_mask(key)
        return np.arange(key_dim(key)) if mask is None else np.flatnonzero(mask)

    def _add_factor(self, f):
        self.factors.append(f)
        if self.cfg.record_factors:
            self.all_factors.append(f)

    def _set_value(self, key, value):
        self.values[key] = value
        if self.cfg.record_factors:
            self.initial_values[key] = value

    def recorded_problem(self):
        """(values, factors, free masks) of every factor ever created, for a batch solve."""
        if not self.cfg.record_factors:
            raise RuntimeError("construct with record_factors=True")
        values = {**self.marginalized_values, **self.values}
        keys = {k for f in self.all_factors for k in f.keys}
        return values, list(self.all_factors), {k: self.free_mask(k) for k in keys}

    def state(self) -> SlidingWindowState:
        k = self.k
        poses = {self.kf_times[i]: self.values[("pose", i)] for i in self.window}
        sb = self.values.get(("sb", k), np.zeros(9))
        info = self.prior.information_matrix() if self.prior is not None else np.zeros((0, 0))
        grad = self.prior.gradient_vector() if self.prior is not None else np.zeros(0)
        return SlidingWindowState(poses, sb.copy(), ManifoldParams(self.values[("m", k)]),
                                  KinematicParams.from_array(self.values[("xi", k)]), info, grad)

    # ------------------------------------------------------------- start-up
    def initialize(self, t0: float, pose0: Pose, xi0, speed_bias0=None, manifold0=None, feature_ids=(), uvs=()):
        cfg = self.cfg
        self.k = 0
        self.kf_times[0] = float(t0)
        self.window = [0]
        xi0 = np.asarray(KinematicParams.from_array(xi0).check().as_array())
        self._set_value(("pose", 0), pose0.copy())
        self._set_value(("xi", 0), xi0.copy())
        if manifold0 is None:
            manifold0 = self._plane_through(pose0)
        m0 = manifold0.as_array() if isinstance(manifold0, ManifoldParams) else np.asarray(manifold0, dtype=float)
        self._set_value(("m", 0), m0.copy())
        keys = [("pose", 0), ("xi", 0), ("m", 0)]
        stds = [np.full(6, cfg.first_pose_prior_std), np.asarray(cfg.xi_prior_std)[self._free_dims(("xi", 0))],
                np.asarray(cfg.manifold_prior_std)]
        if cfg.use_imu:
            sb0 = np.zeros(9) if speed_bias0 is None else np.asarray(speed_bias0, dtype=float)
            self._set_value(("sb", 0), sb0.copy())
            keys.insert(1, ("sb", 0))
            stds.insert(1, np.concatenate([np.full(3, cfg.velocity_prior_std), np.full(3, cfg.accel_bias_prior_std),
                                           np.full(3, cfg.gyro_bias_prior_std)]))
        dims = {k: self._free_dims(k) for k in keys}
        self.prior = PriorFactor.diagonal(keys, self.values, dims, stds)
        if cfg.record_factors:
            self.all_factors.append(self.prior)
        if cfg.use_manifold:
            self._add_factor(ManifoldFactor((("pose", 0), ("m", 0)), cfg.manifold_weights))
        self._add_observations(0, feature_ids, uvs)
        self._pred_t = float(t0)
        self._pred_pose = pose0.copy()
        self._record(0, None)

    @staticmethod
    def _plane_through(pose: Pose) -> np.ndarray:
        """Manifold parameters of the plane through the pose, normal to its z axis."""
        n = pose.R[:, 2]
        p = pose.position
        # gradient (b, 1) parallel to n, surface value zero at p
        grad_xy = n[:2] / n[2]
        c = -p[2] - grad_xy @ p[:2]
        return np.array([0.0, 0.0, 0.0, grad_xy[0], grad_xy[1], c])

    # ------------------------------------------------------------ main loop
    def predict_pose(self, t: float) -> Pose:
        """Dead-reckoned pose at t from the newest keyframe using the current xi."""
        if t < self._pred_t:
            self._pred_t = self.kf_times[self.k]
            self._pred_pose = self.values[("pose", self.k)].copy()
        self._pred_pose = dead_reckon(self._pred_pose, self.values[("xi", self.k)], self.encoders, self._pred_t, t)
        self._pred_t = float(t)
        return self._pred_pose

    def process_frame(self, t: float, feature_ids, uvs) -> bool:
        """Returns True when the frame became a keyframe."""
        if not self.initialized:
            raise RuntimeError("call initialize() first")
        predicted = self.predict_pose(t)
        if not should_create_keyframe(self.values[("pose", self.k)], predicted, self.cfg):
            return False
        self.step(t, feature_ids, uvs)
        return True

    def step(self, t: float, feature_ids, uvs):
        cfg = self.cfg
        kp = self.k
        k = kp + 1
        t_prev = self.kf_times[kp]
        xi_prev = self.values[("xi", kp)]
        prop = propagate_odometry(OdometryState(self.values[("pose", kp)], KinematicParams.from_array(xi_prev)),
                                  self.encoders, t_prev, t, self.noise)
        self.k = k
        self.kf_times[k] = float(t)
        self.window.append(k)
        self._set_value(("pose", k), prop.predicted.pose)
        self._set_value(("xi", k), xi_prev.copy())
        self._add_factor(OdometryFactor((("pose", kp), ("xi", kp), ("pose", k), ("xi", k)), prop))
        if cfg.use_imu:
            sb_prev = self.values[("sb", kp)]
            data = resample_interval(self.imu, t_prev, t)
            preint = imu_preintegrate(data, sb_prev[3:9], self.noise)
            R_i = self.values[("pose", kp)].R @ self.rig.extrinsics_OI.R
            v_new = sb_prev[0:3] + self.rig.gravity * preint.duration + R_i @ preint.delta_velocity
            self._set_value(("sb", k), np.concatenate([v_new, sb_prev[3:9]]))
            self._add_factor(ImuFactor((("pose", kp), ("sb", kp), ("pose", k), ("sb", k)), preint,
                                       self.rig.gravity, self.rig.extrinsics_OI))
        self._set_value(("m", k), self.values[("m", kp)].copy())
        if cfg.use_manifold:
            self._add_factor(ManifoldFactor((("pose", k), ("m", k), ("m", kp)), cfg.manifold_weights))

        self._add_observations(k, feature_ids, uvs)
        layout = self._layout()
        factors = self.factors + [self.prior]
        self.values, report, sys = solve(self.values, factors, layout, cfg.max_iterations, cfg.convergence_tol,
                                         cfg.initial_damping, cfg.huber_threshold)
        self._record(k, (report, sys, layout))
        self._marginalize()
        self._pred_t = float(t)
        self._pred_pose = self.values[("pose", k)].copy()
        return report

    # ---------------------------------------------------------- landmarks
    def _add_observations(self, k, feature_ids, uvs):
        sigma = self.noise.sigma_pixel
        ext = self.rig.extrinsics_OC
        for fid, uv in zip(np.asarray(feature_ids, dtype=int).tolist(), np.asarray(uvs, dtype=float)):
            tr = self.tracks.get(fid)
            if tr is not None:
                if self._in_front(("pose", k), tr.key, uv):
                    tr.obs.append((k, uv))
                    self._add_factor(VisualFactor(("pose", k), tr.key, uv, sigma, ext))
                continue
            pend = self.pending.setdefault(fid, [])
            pend.append((k, uv))
            if len(pend) < 2:
                continue
            poses = [self.values[("pose", i)] for i, _ in pend]
            p = triangulate(np.array([u for _, u in pend]), poses, ext, sigma, self.cfg.min_triangulation_baseline)
            if p is None:
                continue
            key = ("lm", self.next_landmark)
            self.next_landmark += 1
            self._set_value(key, p)
            tr = _Track(key, list(pend))
            self.tracks[fid] = tr
            del self.pending[fid]
            for i, u in tr.obs:
                self._add_factor(VisualFactor(("pose", i), key, u, sigma, ext))

    def _in_front(self, pose_key, lm_key, uv):
        pose = self.values[pose_key]
        _, _, _, depth = visual_batch(pose.R[None], pose.position[None], self.values[lm_key][None],
                                      np.asarray(uv)[None], self.rig.extrinsics_OC, with_jacobians=False)
        return bool(depth[0] > 0.01)

    # ---------------------------------------------------------- linear algebra
    def _state_keys(self):
        keys = []
        for i in self.window:
            keys.append(("pose", i))
        for name in ("xi", "sb", "m"):
            for i in (self.k - 1, self.k):
                if (name, i) in self.values:
                    keys.append((name, i))
        return keys

    def _layout(self, state_keys=None, lm_keys=None):
        state_keys = self._state_keys() if state_keys is None else state_keys
        lm_keys = [tr.key for tr in self.tracks.values()] if lm_keys is None else lm_keys
        return Layout(state_keys, lm_keys, {k: self.free_mask(k) for k in state_keys})

    def _record(self, k, solved):
        # before the first solve the marginal is the xi prior itself
        xi_std = np.where(self.cfg.xi_free, np.asarray(self.cfg.xi_prior_std, dtype=float), 0.0)
        iterations, cost = 0, 0.0
        if solved is not None:
            report, sys, layout = solved
            iterations, cost = report.iterations, report.final_cost
            xi_std = self.marginal_std(("xi", k), sys, layout)
        sb = self.values.get(("sb", k))
        self.records.append(KeyframeRecord(k, self.kf_times[k], self.values[("pose", k)].copy(),
                                           self.values[("xi", k)].copy(), xi_std,
                                           None if sb is None else sb.copy(), self.values[("m", k)].copy(),
                                           iterations, cost))

    def marginal_std(self, key, sys, layout) -> np.ndarray:
        out = np.zeros(key_dim(key))
        idx = layout.free_idx[key]
        if len(idx) == 0:
            return out
        H, _, _ = reduce_landmarks(sys, 0.0)
        d = np.sqrt(np.maximum(np.diag(H), 1e-300))
        w, V = np.linalg.eigh(0.5 * (H + H.T) / d[:, None] / d[None, :])
        w = np.maximum(w, 1e-14 * max(w.max(), 1e-300))
        c = layout.cols(key)
        Vc = V[c] / d[c, None]
        cov = (Vc / w) @ Vc.T
        out[idx] = np.sqrt(np.maximum(np.diag(cov), 0.0))
        return out

    def _marginalize(self):
        k = self.k
        marg = [(name, k - 1) for name in ("xi", "sb", "m") if (name, k - 1) in self.values]
        marg_lm = []
        if len(self.window) > self.cfg.window_size:
            oldest = self.window.pop(0)
            marg.append(("pose", oldest))
            for fid in [f for f, tr in self.tracks.items() if any(i == oldest for i, _ in tr.obs)]:
                marg_lm.append(self.tracks.pop(fid).key)
            for fid in list(self.pending):
                self.pending[fid] = [(i, u) for i, u in self.pending[fid] if i != oldest]
                if not self.pending[fid]:
                    del self.pending[fid]
        marg_set = set(marg) | set(marg_lm)
        touching = [f for f in self.factors if any(key in marg_set for key in f.keys)]
        keep = [f for f in self.factors if not any(key in marg_set for key in f.keys)]
        absorbed = touching + [self.prior]
        neighbors = []
        for f in absorbed:
            for key in f.keys:
                if key not in marg_set and key not in neighbors:
                    neighbors.append(key)
        state_keys = marg + neighbors
        layout = self._layout(state_keys, marg_lm)
        sys = linearize(self.values, absorbed, layout, self.cfg.huber_threshold)
        H, b, _ = reduce_landmarks(sys, 0.0)
        n_marg = sum(len(layout.free_idx[key]) for key in marg)
        lam, g = marginalize(H, b, np.arange(n_marg))
        dims = {key: layout.free_idx[key] for key in neighbors}
        self.prior = PriorFactor.from_information(neighbors, self.values, dims, lam, g)
        self.factors = keep
        for key in marg_set:
            if self.cfg.record_factors:
                self.marginalized_values[key] = self.values[key]
            del self.values[key]
