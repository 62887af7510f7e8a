"""ICR skid-steering kinematics.

Parameter vector order is [X_v, Y_l, Y_r, alpha_l, alpha_r]: X_v is the
longitudinal position of the body ICR, Y_l / Y_r the lateral positions of
the left / right track ICRs, alpha_* the encoder correction factors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateParamsError, InsufficientExcitationError

DELTA_Y_FLOOR = 1e-6
GYRO_THRESHOLD = 0.05
MIN_INIT_SAMPLES = 10


@dataclass(frozen=True)
class KinematicParams:
    X_v: float
    Y_l: float
    Y_r: float
    alpha_l: float = 1.0
    alpha_r: float = 1.0

    @classmethod
    def from_array(cls, arr) -> "KinematicParams":
        a = np.asarray(arr, dtype=float).reshape(5)
        return cls(*(float(x) for x in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.X_v, self.Y_l, self.Y_r, self.alpha_l, self.alpha_r])

    @property
    def delta_y(self) -> float:
        return self.Y_l - self.Y_r

    def check(self) -> "KinematicParams":
        if abs(self.delta_y) <= DELTA_Y_FLOOR:
            raise DegenerateParamsError(f"|Y_l - Y_r| = {abs(self.delta_y):.3g} m is below {DELTA_Y_FLOOR}")
        return self


class EncoderReading(NamedTuple):
    t: float
    o_l: float
    o_r: float


class BodyVelocity(NamedTuple):
    v_x: float
    v_y: float
    omega_z: float


def _as_params(xi) -> KinematicParams:
    if isinstance(xi, KinematicParams):
        return xi
    return KinematicParams.from_array(xi)


def _delta_y(X_v, Y_l, Y_r):
    dy = Y_l - Y_r
    if np.any(np.abs(dy) <= DELTA_Y_FLOOR):
        raise DegenerateParamsError("ICR lateral positions coincide")
    return dy


def body_velocity_array(xi, o_l, o_r) -> np.ndarray:
    """Vectorized forward model: returns (..., 3) array of (v_x, v_y, omega)."""
    X_v, Y_l, Y_r, a_l, a_r = np.asarray(xi, dtype=float).reshape(5)
    dy = _delta_y(X_v, Y_l, Y_r)
    wl = a_l * np.asarray(o_l, dtype=float)
    wr = a_r * np.asarray(o_r, dtype=float)
    omega = (wr - wl) / dy
    v_x = (-Y_r * wl + Y_l * wr) / dy
    return np.stack([v_x, -X_v * omega, omega], axis=-1)


def forward_kinematics(xi, o_l: float, o_r: float) -> BodyVelocity:
    p = _as_params(xi)
    dy = _delta_y(p.X_v, p.Y_l, p.Y_r)
    wl = p.alpha_l * o_l
    wr = p.alpha_r * o_r
    omega = (wr - wl) / dy
    v_x = (-p.Y_r * wl + p.Y_l * wr) / dy
    return BodyVelocity(v_x, -p.X_v * omega, omega)


def inverse_kinematics(xi, v_x: float, omega_z: float):
    p = _as_params(xi)
    _delta_y(p.X_v, p.Y_l, p.Y_r)
    if p.alpha_l <= 0 or p.alpha_r <= 0:
        raise DegenerateParamsError("correction factors must be positive")
    o_l = (v_x - p.Y_l * omega_z) / p.alpha_l
    o_r = (v_x - p.Y_r * omega_z) / p.alpha_r
    return o_l, o_r


def jacobians(xi, o_l: float, o_r: float):
    """(J_vxi, J_vo, J_wxi, J_wo).

    J_vxi, J_wxi are derivatives of the body linear / angular velocity w.r.t.
    the parameters. J_vo, J_wo are w.r.t. the encoder noise n, where the true
    wheel speed is o_m - n, so they carry the opposite sign of d/do.
    Rows are (x, y, z) components; the angular velocity only has a z row.
    """
    X_v, Y_l, Y_r, a_l, a_r = _as_params(xi).as_array()
    dy = _delta_y(X_v, Y_l, Y_r)
    diff = a_l * o_l - a_r * o_r

    J_vxi = (diff / dy ** 2) * np.array([
        [0.0, Y_r, -Y_l, 0.0, 0.0],
        [dy, -X_v, X_v, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ]) + (1.0 / dy) * np.array([
        [0.0, 0.0, 0.0, -Y_r * o_l, Y_l * o_r],
        [0.0, 0.0, 0.0, X_v * o_l, -X_v * o_r],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ])
    J_vo = -(1.0 / dy) * np.array([
        [-a_l * Y_r, a_r * Y_l],
        [X_v * a_l, -X_v * a_r],
        [0.0, 0.0],
    ])
    J_wxi = np.zeros((3, 5))
    J_wxi[2] = np.array([0.0, diff, -diff, -dy * o_l, dy * o_r]) / dy ** 2
    J_wo = np.zeros((3, 2))
    J_wo[2] = -np.array([-a_l, a_r]) / dy
    return J_vxi, J_vo, J_wxi, J_wo


def ideal_params(track_width_b: float) -> KinematicParams:
    if track_width_b <= 0:
        raise DegenerateParamsError("track width must be positive")
    return KinematicParams(0.0, 0.5 * track_width_b, -0.5 * track_width_b, 1.0, 1.0)


def initialize_track_width(encoder_samples: Sequence[EncoderReading], gyro_yaw_samples,
                           threshold: float = GYRO_THRESHOLD,
                           min_samples: int = MIN_INIT_SAMPLES) -> float:
    """Effective track width from simultaneous wheel and gyro yaw readings."""
    enc = np.array([[e.o_l, e.o_r] for e in encoder_samples], dtype=float).reshape(-1, 2)
    gyro = np.asarray(gyro_yaw_samples, dtype=float).reshape(-1)
    if len(enc) != len(gyro):
        raise ValueError("encoder and gyro sequences must be time-aligned and equally long")
    keep = np.abs(gyro) > threshold
    if keep.sum() < max(min_samples, 1):
        raise InsufficientExcitationError(
            f"only {int(keep.sum())} samples above {threshold} rad/s, need {max(min_samples, 1)}")
    ratio = np.abs(enc[keep, 0] - enc[keep, 1]) / np.abs(gyro[keep])
    return float(ratio.mean())
