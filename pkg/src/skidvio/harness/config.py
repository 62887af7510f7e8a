"""Scenario configuration loaded from YAML."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from ..errors import ConfigError
from ..estimator.window import XI_ALL, XI_ICR, XI_NONE, EstimatorConfig
from ..geom import Pose, Rotation
from ..kinematics import KinematicParams
from ..propagation import NoiseConfig
from ..simulate import (BUNDLED_PROFILES, DEFAULT_XI, NOMINAL_FOCAL_PX, ManifoldParams, MotionProfile, Segment,
                        SensorRig, bundled_profile)

# mode -> (use IMU, free xi elements)
MODES = {
    "vio_xi5": (True, XI_ALL),
    "vo_icr3": (False, XI_ICR),
    "vio_fixed_xi": (True, XI_NONE),
    "vio_icr3": (True, XI_ICR),
    "vo_xi5": (False, XI_ALL),
}
PUBLIC_MODES = ("vio_xi5", "vo_icr3", "vio_fixed_xi", "vio_icr3")
XI_INIT_KINDS = ("explicit", "perturbed", "track-width")


@dataclass
class ScenarioConfig:
    profile: str = "general-motion"
    xi_true: KinematicParams = DEFAULT_XI
    xi_walk_sigma: float = 0.0          # std per sqrt(s) of a random-walk ground-truth xi; 0 keeps it constant
    xi_initial: str = "perturbed"
    xi_initial_value: tuple = None
    xi_initial_offset: tuple = (0.0,) * 5
    xi_initial_std: float = 0.08
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    noise_free: bool = False
    rig: SensorRig = field(default_factory=SensorRig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    mode: str = "vio_xi5"
    seeds: tuple = (0,)
    dt: float = 0.005
    encoder_rate: float = 100.0
    imu_rate: float = 200.0
    camera_rate: float = 10.0
    landmarks_per_meter: float = 3.0
    corridor_width: float = 20.0
    duration: float = None
    base_dir: str = "."

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"field 'mode': unknown mode {self.mode!r}")
        if self.xi_initial not in XI_INIT_KINDS:
            raise ConfigError(f"field 'xi_initial': expected one of {XI_INIT_KINDS}")
        if self.xi_initial == "explicit" and self.xi_initial_value is None:
            raise ConfigError("field 'xi_initial_value': required when xi_initial is 'explicit'")
        if not self.seeds:
            raise ConfigError("field 'seeds': at least one seed is required")
        use_imu, free = MODES[self.mode]
        # the mode owns the sensor set and the free xi elements
        self.estimator = replace(self.estimator, use_imu=use_imu, xi_free=free)

    def with_mode(self, mode: str) -> "ScenarioConfig":
        return replace(self, mode=mode)

    def motion_profile(self) -> MotionProfile:
        return resolve_profile(self.profile, self.xi_true, self.base_dir)


def resolve_profile(ref: str, xi: KinematicParams = None, base_dir: str = ".") -> MotionProfile:
    if ref in BUNDLED_PROFILES:
        return bundled_profile(ref, xi)
    path = ref if os.path.isabs(ref) else os.path.join(base_dir, ref)
    if not os.path.exists(path):
        raise ConfigError(f"field 'profile': {ref!r} is neither a bundled profile nor an existing file")
    data = _load_yaml(path)
    try:
        segs = [Segment(float(s["duration"]), float(s["v_x"]), float(s["omega_z"]), float(s.get("ramp", 0.0)))
                for s in data["segments"]]
        manifold = ManifoldParams(np.asarray(data.get("manifold", [0.0] * 6), dtype=float))
        return MotionProfile(segs, manifold, str(data.get("name", os.path.basename(path))))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"profile file {path}: field 'segments': {exc}") from exc


def _load_yaml(path: str):
    try:
        with open(path) as fh:
            return yaml.safe_load(fh)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ConfigError(f"{path}:{mark.line + 1}:{mark.column + 1}: {exc.problem}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc


def _build(cls, data, name, converters=None):
    """Dataclass from a mapping, rejecting unknown keys with the field path."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"field '{name}': expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"field '{name}.{unknown[0]}': unknown key")
    kwargs = {}
    for k, v in data.items():
        conv = (converters or {}).get(k)
        try:
            kwargs[k] = conv(v) if conv else (tuple(v) if isinstance(v, list) else v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field '{name}.{k}': {exc}") from exc
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{name}': {exc}") from exc


def _xi(v, name):
    try:
        if isinstance(v, dict):
            return KinematicParams(**{k: float(x) for k, x in v.items()}).check()
        return KinematicParams.from_array(v).check()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{name}': {exc}") from exc


def _pose(v, name):
    if not isinstance(v, dict) or "position" not in v:
        raise ConfigError(f"field '{name}': expected a mapping with position and rotation")
    try:
        p = np.asarray(v["position"], dtype=float).reshape(3)
        if "rotation_matrix" in v:
            rot = Rotation.from_matrix(np.asarray(v["rotation_matrix"], dtype=float).reshape(3, 3))
        else:
            rot = Rotation(np.asarray(v.get("quaternion", [0, 0, 0, 1]), dtype=float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{name}': {exc}") from exc
    return Pose(rot, p)


def _rig(data):
    if data is None:
        return SensorRig()
    conv = {"extrinsics_OC": lambda v: _pose(v, "rig.extrinsics_OC"),
            "extrinsics_OI": lambda v: _pose(v, "rig.extrinsics_OI"),
            "gravity": lambda v: np.asarray(v, dtype=float).reshape(3),
            "fov_half_angle": lambda v: float(np.deg2rad(v))}
    return _build(SensorRig, data, "rig", conv)


def _noise(data):
    if data is None:
        return NoiseConfig()
    data = dict(data)
    scale = data.pop("scale", 1.0)
    if "sigma_pixel_px" in data:
        data["sigma_pixel"] = float(data.pop("sigma_pixel_px")) / NOMINAL_FOCAL_PX
    return _build(NoiseConfig, data, "noise").scaled(float(scale))


def scenario_from_dict(data: dict, base_dir: str = ".") -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    kwargs = {"base_dir": base_dir}
    top = {f.name for f in dataclasses.fields(ScenarioConfig)} - {"base_dir"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"field '{unknown[0]}': unknown key")
    for k, v in data.items():
        if k == "xi_true":
            kwargs[k] = _xi(v, k)
        elif k == "noise":
            kwargs[k] = _noise(v)
        elif k == "rig":
            kwargs[k] = _rig(v)
        elif k == "estimator":
            est = dict(v or {})
            if "keyframe_rotation_gate_deg" in est:
                est["keyframe_rotation_gate"] = float(np.deg2rad(est.pop("keyframe_rotation_gate_deg")))
            kwargs[k] = _build(EstimatorConfig, est, "estimator")
        elif k in ("xi_initial_value", "xi_initial_offset"):
            try:
                kwargs[k] = tuple(float(x) for x in np.asarray(v, dtype=float).reshape(5))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"field '{k}': expected 5 numbers") from exc
        elif k == "seeds":
            if isinstance(v, int):
                v = list(range(v))
            try:
                kwargs[k] = tuple(int(s) for s in v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"field 'seeds': {exc}") from exc
        elif k == "profile":
            kwargs[k] = str(v)
        elif k in ("mode", "xi_initial"):
            kwargs[k] = str(v)
        elif k == "noise_free":
            kwargs[k] = bool(v)
        else:
            try:
                kwargs[k] = None if v is None else float(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"field '{k}': expected a number") from exc
    cfg = ScenarioConfig(**kwargs)
    cfg.motion_profile()    # fail early on a bad profile reference
    return cfg


def load_config(path: str) -> ScenarioConfig:
    data = _load_yaml(path)
    return scenario_from_dict(data or {}, os.path.dirname(os.path.abspath(path)))


@dataclass
class ObservabilityConfig:
    variants: tuple = ("mono5", "mono3", "vio5", "ext_p", "ext_theta")
    profiles: tuple = ("general-motion", "straight-line", "constant-circle")
    xi_true: KinematicParams = DEFAULT_XI
    rig: SensorRig = field(default_factory=SensorRig)
    scale: float = 1.0
    stride: int = 10
    dt: float = 0.005
    tol_ratio: float = 1e-8
    base_dir: str = "."


def observability_from_dict(data: dict, base_dir: str = ".") -> ObservabilityConfig:
    from ..observability import VARIANTS

    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    known = {f.name for f in dataclasses.fields(ObservabilityConfig)} - {"base_dir"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"field '{unknown[0]}': unknown key")
    kwargs = {"base_dir": base_dir}
    for k, v in data.items():
        if k == "variants":
            bad = [x for x in v if x not in VARIANTS]
            if bad:
                raise ConfigError(f"field 'variants': unknown variant {bad[0]!r}")
            kwargs[k] = tuple(v)
        elif k == "profiles":
            kwargs[k] = tuple(str(x) for x in v)
        elif k == "xi_true":
            kwargs[k] = _xi(v, k)
        elif k == "rig":
            kwargs[k] = _rig(v)
        elif k == "stride":
            kwargs[k] = int(v)
        else:
            try:
                kwargs[k] = float(v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"field '{k}': expected a number") from exc
    cfg = ObservabilityConfig(**kwargs)
    for p in cfg.profiles:
        resolve_profile(p, cfg.xi_true, base_dir)
    return cfg


def load_observability_config(path: str) -> ObservabilityConfig:
    data = _load_yaml(path)
    return observability_from_dict(data or {}, os.path.dirname(os.path.abspath(path)))
