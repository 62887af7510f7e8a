import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, relative_error
from skidvio.errors import DegenerateParamsError, InsufficientExcitationError
from skidvio.kinematics import (EncoderReading, KinematicParams, body_velocity_array, forward_kinematics,
                                ideal_params, initialize_track_width, inverse_kinematics, jacobians)


@st.composite
def valid_xi(draw):
    X_v = draw(st.floats(-0.3, 0.3))
    Y_l = draw(st.floats(0.1, 1.0))
    Y_r = draw(st.floats(-1.0, -0.1))
    a_l = draw(st.floats(0.5, 1.5))
    a_r = draw(st.floats(0.5, 1.5))
    return KinematicParams(X_v, Y_l, Y_r, a_l, a_r)


speed = st.floats(-2.0, 2.0)


def test_forward_examples():
    b = 0.6
    assert forward_kinematics(ideal_params(b), 1.0, 1.0) == pytest.approx((1.0, 0.0, 0.0))
    assert forward_kinematics(ideal_params(b), 1.0, 1.3).omega_z == pytest.approx(0.3 / b)
    out = forward_kinematics(KinematicParams(0.1, 0.3, -0.3, 1, 1), 1.0, 2.0)
    assert out == pytest.approx((1.5, -1 / 6, 5 / 3))
    assert forward_kinematics(KinematicParams(0.2, 0.4, -0.2, 0.9, 1.1), 0.0, 0.0) == (0.0, 0.0, 0.0)


def test_inverse_examples():
    assert inverse_kinematics(KinematicParams(0.1, 0.3, -0.3, 1, 1), 1.5, 5 / 3) == pytest.approx((1.0, 2.0))
    assert inverse_kinematics(ideal_params(0.5), 0.7, 0.0) == pytest.approx((0.7, 0.7))
    assert inverse_kinematics(ideal_params(0.5), 0.0, 2.0) == pytest.approx((-0.5, 0.5))


def test_ideal_params():
    assert ideal_params(1.0).as_array() == pytest.approx([0, 0.5, -0.5, 1, 1])
    with pytest.raises(DegenerateParamsError):
        ideal_params(0.0)


@given(valid_xi(), speed, speed)
def test_round_trip_and_side_slip(xi, o_l, o_r):
    v = forward_kinematics(xi, o_l, o_r)
    assert v.v_y == -xi.X_v * v.omega_z
    back = inverse_kinematics(xi, v.v_x, v.omega_z)
    assert np.allclose(back, (o_l, o_r), atol=1e-12)


@given(valid_xi(), speed, speed, speed, speed, st.floats(-2, 2), st.floats(-2, 2))
def test_forward_is_linear_in_wheel_speeds(xi, u_l, u_r, w_l, w_r, a, c):
    lhs = np.array(forward_kinematics(xi, a * u_l + c * w_l, a * u_r + c * w_r))
    rhs = a * np.array(forward_kinematics(xi, u_l, u_r)) + c * np.array(forward_kinematics(xi, w_l, w_r))
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_vectorized_forward_matches_scalar():
    xi = KinematicParams(0.04, 0.32, -0.30, 0.93, 0.95)
    o = np.array([[0.3, 0.5], [-1.0, 0.2], [0.0, 0.0]])
    arr = body_velocity_array(xi.as_array(), o[:, 0], o[:, 1])
    for row, (o_l, o_r) in zip(arr, o):
        assert np.allclose(row, forward_kinematics(xi, o_l, o_r))


def test_degenerate_params_rejected():
    with pytest.raises(DegenerateParamsError):
        forward_kinematics(KinematicParams(0.0, 0.3, 0.3), 1.0, 1.0)
    with pytest.raises(DegenerateParamsError):
        KinematicParams(0.0, 0.3, 0.3 - 1e-7).check()


def _numeric_jacobians(xi, o_l, o_r):
    x = xi.as_array()

    def over_xi(p):
        v = forward_kinematics(p, o_l, o_r)
        return np.array([v.v_x, v.v_y, 0.0]), np.array([0.0, 0.0, v.omega_z])

    def over_noise(n):
        # measured speed o_m = o + n, so the true speed is o_m - n
        v = forward_kinematics(xi, o_l - n[0], o_r - n[1])
        return np.array([v.v_x, v.v_y, 0.0]), np.array([0.0, 0.0, v.omega_z])

    J_vxi = central_difference(lambda p: over_xi(p)[0], x)
    J_wxi = central_difference(lambda p: over_xi(p)[1], x)
    J_vo = central_difference(lambda n: over_noise(n)[0], np.zeros(2))
    J_wo = central_difference(lambda n: over_noise(n)[1], np.zeros(2))
    return J_vxi, J_vo, J_wxi, J_wo


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        xi = KinematicParams(rng.uniform(-0.3, 0.3), rng.uniform(0.1, 1.0), rng.uniform(-1.0, -0.1),
                             rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5))
        o_l, o_r = rng.uniform(-2, 2, 2)
        for num, ana in zip(_numeric_jacobians(xi, o_l, o_r), jacobians(xi, o_l, o_r)):
            worst = max(worst, relative_error(num, ana))
    assert worst < 1e-5


def test_jacobian_structure_at_rest_and_ideal():
    xi = KinematicParams(0.04, 0.32, -0.30, 0.93, 0.95)
    J_vxi, J_vo, J_wxi, J_wo = jacobians(xi, 0.0, 0.0)
    assert np.all(J_vxi[:, :3] == 0.0)
    assert np.any(J_vo != 0.0) and np.any(J_wo != 0.0)
    b = 0.5
    _, _, _, J_wo = jacobians(ideal_params(b), 1.0, 1.0)
    assert np.allclose(J_wo, [[0, 0], [0, 0], [1 / b, -1 / b]])


def test_track_width_initialization():
    assert initialize_track_width([EncoderReading(0.0, -0.5, 0.5)], [2.0], min_samples=1) == pytest.approx(0.5)
    xi = ideal_params(0.62)
    w = np.linspace(0.3, 1.2, 40)
    samples = [EncoderReading(i * 0.01, *inverse_kinematics(xi, 0.0, wi)) for i, wi in enumerate(w)]
    assert abs(initialize_track_width(samples, w) - 0.62) < 1e-12
    with pytest.raises(InsufficientExcitationError):
        initialize_track_width(samples, np.full(len(w), 0.01))
