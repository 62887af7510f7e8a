import numpy as np
import pytest

from skidvio.errors import ManifoldGradientError
from skidvio.estimator.triangulate import triangulate
from skidvio.geom import Pose, Rotation
from skidvio.kinematics import KinematicParams, forward_kinematics
from skidvio.propagation import NoiseConfig
from skidvio.simulate import (BUNDLED_PROFILES, DEFAULT_XI, Landmark, ManifoldParams, MotionProfile, Segment,
                              SensorRig, XiSchedule, bundled_profile, camera_poses, generate_trajectory,
                              scatter_landmarks, synthesize_encoders, synthesize_features, synthesize_imu)

XI = DEFAULT_XI


def test_straight_segment_on_flat_ground():
    traj = generate_trajectory(MotionProfile([Segment(10.0, 1.0, 0.0)]), XI, 0.01)
    assert np.allclose(traj.positions[-1], [10, 0, 0], atol=1e-12)
    assert np.allclose(traj.quats[-1], [0, 0, 0, 1])


def test_circle_closes():
    traj = generate_trajectory(MotionProfile([Segment(4 * np.pi, 1.0, 0.5)]), KinematicParams(0, 0.3, -0.3), 0.01)
    assert np.linalg.norm(traj.positions[-1] - traj.positions[0]) < 1e-6


def test_tilted_plane_pitch_matches_slope():
    m = ManifoldParams([0, 0, 0, 0.1, 0, 0])
    profile = MotionProfile([Segment(5.0, 1.0, 0.0), Segment(5.0, 1.0, 0.4, 1.0)], m)
    traj = generate_trajectory(profile, XI, 0.01)
    for k in range(0, len(traj), 50):
        yaw, pitch, _ = Rotation(traj.quats[k]).euler_zyx()
        # the surface z = -0.1 x falls along +x; a nose-down attitude is a positive pitch about y
        assert pitch == pytest.approx(np.arctan(0.1 * np.cos(yaw)), abs=1e-9)
        assert m.value(traj.positions[k]) == pytest.approx(0.0, abs=1e-12)


def test_manifold_gradient_guard():
    with pytest.raises(ManifoldGradientError):
        generate_trajectory(MotionProfile([Segment(5.0, 1.0, 0.0)], ManifoldParams([0, 0, 0, 20.0, 0, 0])), XI, 0.01)


def test_dt_precondition():
    with pytest.raises(ValueError):
        generate_trajectory(MotionProfile([Segment(1.0, 1.0, 0.0)]), XI, 0.05)


def test_encoders_round_trip_velocity():
    traj = generate_trajectory(bundled_profile("general-motion"), XI, 0.005)
    enc = synthesize_encoders(traj, XI, None, 100.0, as_array=True)
    idx = np.searchsorted(traj.t, enc[:, 0] - 1e-9)
    for row, k in zip(enc[::97], idx[::97]):
        assert np.allclose(forward_kinematics(XI, row[1], row[2]), traj.velocities[k], atol=1e-12)


def test_encoder_noise_level():
    traj = generate_trajectory(MotionProfile([Segment(100.0, 1.0, 0.1)]), XI, 0.005)
    clean = synthesize_encoders(traj, XI, None, 100.0, as_array=True)
    noisy = synthesize_encoders(traj, XI, NoiseConfig(), 100.0, seed=3, as_array=True)
    assert len(clean) >= 10_000
    std = np.std(noisy[:, 1] - clean[:, 1])
    assert 0.023 <= std <= 0.026


def test_alpha_step_rescales_encoders():
    traj = generate_trajectory(MotionProfile([Segment(4.0, 1.0, 0.2)]), XI, 0.005)
    stepped = XI.as_array().copy()
    stepped[3] *= 1.25
    sched = XiSchedule([0.0, 2.0], [XI.as_array(), stepped])
    base = synthesize_encoders(traj, XI, None, 100.0, as_array=True)
    out = synthesize_encoders(traj, sched, None, 100.0, as_array=True)
    late = out[:, 0] >= 2.0
    assert np.allclose(out[~late, 1:], base[~late, 1:])
    assert np.allclose(out[late, 1] * 1.25, base[late, 1])
    assert np.allclose(out[late, 2], base[late, 2])


def test_imu_stationary_and_constant_rate():
    still = generate_trajectory(MotionProfile([Segment(2.0, 0.0, 0.0)]), XI, 0.005)
    imu = synthesize_imu(still, SensorRig(), None, 200.0, as_array=True)
    assert np.allclose(imu[:, 1:4], 0.0, atol=1e-12)
    assert np.allclose(imu[:, 4:7], [0, 0, 9.81], atol=1e-9)
    spin = generate_trajectory(MotionProfile([Segment(2.0, 0.0, 0.5)]), XI, 0.005)
    imu = synthesize_imu(spin, SensorRig(), None, 200.0, as_array=True)
    assert np.allclose(imu[:, 1:4], [0, 0, 0.5], atol=1e-9)


def test_gyro_noise_level():
    still = generate_trajectory(MotionProfile([Segment(50.0, 0.0, 0.0)]), XI, 0.005)
    noise = NoiseConfig(sigma_gyro_bias_walk=1e-12, sigma_accel_bias_walk=1e-12)
    imu = synthesize_imu(still, SensorRig(), noise, 200.0, bias_walk_seed=4, as_array=True)
    assert len(imu) >= 10_000
    std = imu[:, 1:4].std(axis=0)
    assert np.all(np.abs(std - 9e-4) < 0.1 * 9e-4)


def _single_pose_trajectory(pose: Pose):
    traj = generate_trajectory(MotionProfile([Segment(0.2, 0.0, 0.0)]), XI, 0.02)
    traj.quats[:] = pose.rotation.q
    traj.positions[:] = pose.position
    return traj


def test_feature_projection_examples():
    rig = SensorRig()
    traj = _single_pose_trajectory(Pose.identity())
    R_C, p_C = camera_poses(traj, rig, [0])
    ahead = p_C[0] + R_C[0] @ [0, 0, 4.0]
    behind = p_C[0] + R_C[0] @ [0, 0, -4.0]
    frames = synthesize_features(traj, [Landmark(7, ahead), Landmark(8, behind)], rig, None, 10.0, as_frames=True)
    assert set(frames.landmark_id) == {7}
    assert np.allclose(frames.uv, 0.0, atol=1e-15)


def test_noiseless_features_triangulate_back():
    rig = SensorRig()
    traj = generate_trajectory(bundled_profile("general-motion"), XI, 0.005)
    landmarks = scatter_landmarks(traj, 300, 20.0, seed=2)
    frames = synthesize_features(traj, landmarks, rig, None, 10.0, as_frames=True)
    checked = 0
    for lm in landmarks[:60]:
        rows = np.flatnonzero(frames.landmark_id == lm.id)[:4]
        if len(rows) < 2:
            continue
        poses = [traj.pose(traj.index_of(t)) for t in frames.frame_t[rows]]
        est = triangulate(frames.uv[rows], poses, rig.extrinsics_OC, 1e-3, min_baseline=1e-3)
        if est is None:
            continue
        assert np.linalg.norm(est - lm.position) < 1e-9
        checked += 1
    assert checked > 10


def test_landmark_scatter():
    traj = generate_trajectory(bundled_profile("general-motion"), XI, 0.005)
    with pytest.raises(ValueError):
        scatter_landmarks(traj, 0, 10.0, 1)
    a = scatter_landmarks(traj, 200, 10.0, 1)
    b = scatter_landmarks(traj, 200, 10.0, 1)
    assert all(np.array_equal(x.position, y.position) for x, y in zip(a, b))
    path = traj.positions[::4, :2]
    for lm in a:
        assert np.min(np.linalg.norm(path - lm.position[:2], axis=1)) <= 5.0 + 0.02
        assert 0.2 <= lm.position[2] <= 3.0


def test_bundled_profiles():
    for name in BUNDLED_PROFILES:
        assert bundled_profile(name).duration > 0
    long_drive = bundled_profile("long-205m")
    assert long_drive.path_length() == pytest.approx(205.4, abs=1e-9)
    traj = generate_trajectory(long_drive, XI, 0.005)
    assert traj.path_length() == pytest.approx(205.4, rel=1e-3)
