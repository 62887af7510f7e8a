"""Line-oriented measurement log.

Layout: one HDR line carrying a sorted-key JSON header, then typed records

    ENC t o_l o_r
    IMU t gx gy gz ax ay az
    FEA t frame_id landmark_id u v
    GTP t qx qy qz qw px py pz v_x v_y omega     (optional ground truth)
    GTX t X_v Y_l Y_r alpha_l alpha_r            (optional xi schedule)

Floats are written with %.17g so a read/write cycle reproduces the file.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, StreamMissingError
from ..geom import Pose, Rotation
from ..simulate import FeatureFrames, ManifoldParams, SensorRig, Trajectory, XiSchedule

FORMAT_VERSION = 1
MAGIC = "skidvio-log"
STREAM_WIDTH = {"ENC": 3, "IMU": 7, "FEA": 5, "GTP": 11, "GTX": 6}


@dataclass
class MeasurementLog:
    header: dict
    encoders: np.ndarray                      # (N, 3)
    imu: np.ndarray = None                    # (N, 7) or None
    features: FeatureFrames = None
    ground_truth: np.ndarray = None           # (N, 11) rows of GTP
    xi_schedule: np.ndarray = None            # (N, 6) rows of GTX
    extra: dict = field(default_factory=dict)

    def has_ground_truth(self) -> bool:
        return self.ground_truth is not None and len(self.ground_truth) > 0

    def trajectory(self) -> Trajectory:
        if not self.has_ground_truth():
            raise StreamMissingError("log has no ground-truth stream (GTP)")
        g = self.ground_truth
        m = ManifoldParams(self.header.get("manifold", [0.0] * 6))
        return Trajectory(g[:, 0], g[:, 1:5], g[:, 5:8], g[:, 8:11], float(self.header.get("dt", 0.0)), m)

    def schedule(self) -> XiSchedule:
        if self.xi_schedule is None or len(self.xi_schedule) == 0:
            raise StreamMissingError("log has no xi schedule stream (GTX)")
        return XiSchedule(self.xi_schedule[:, 0], self.xi_schedule[:, 1:6])

    def rig(self) -> SensorRig:
        return rig_from_dict(self.header["rig"]) if "rig" in self.header else SensorRig()


def rig_to_dict(rig: SensorRig) -> dict:
    return {
        "extrinsics_OC": {"quaternion": [float(x) for x in rig.extrinsics_OC.rotation.q],
                          "position": [float(x) for x in rig.extrinsics_OC.position]},
        "extrinsics_OI": {"quaternion": [float(x) for x in rig.extrinsics_OI.rotation.q],
                          "position": [float(x) for x in rig.extrinsics_OI.position]},
        "gravity": [float(x) for x in rig.gravity],
        "fov_half_angle": float(rig.fov_half_angle),
        "max_range": float(rig.max_range),
        "min_depth": float(rig.min_depth),
    }


def rig_from_dict(d: dict) -> SensorRig:
    def pose(p):
        return Pose(Rotation(np.asarray(p["quaternion"], dtype=float)), np.asarray(p["position"], dtype=float))
    return SensorRig(pose(d["extrinsics_OC"]), pose(d["extrinsics_OI"]), np.asarray(d["gravity"], dtype=float),
                     float(d["fov_half_angle"]), float(d["max_range"]), float(d["min_depth"]))


def _fmt(row) -> str:
    return " ".join("%.17g" % x for x in row)


def write_log(log: MeasurementLog, path: str):
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_log(log))


def dumps_log(log: MeasurementLog) -> str:
    header = dict(log.header)
    header["format_version"] = FORMAT_VERSION
    header["magic"] = MAGIC
    lines = ["HDR " + json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines += ["ENC " + _fmt(r) for r in log.encoders]
    if log.imu is not None:
        lines += ["IMU " + _fmt(r) for r in log.imu]
    if log.features is not None:
        f = log.features
        for t, fid, lid, uv in zip(f.frame_t, f.frame_id, f.landmark_id, f.uv):
            lines.append("FEA %.17g %d %d %.17g %.17g" % (t, fid, lid, uv[0], uv[1]))
    if log.ground_truth is not None:
        lines += ["GTP " + _fmt(r) for r in log.ground_truth]
    if log.xi_schedule is not None:
        lines += ["GTX " + _fmt(r) for r in log.xi_schedule]
    return "\n".join(lines) + "\n"


def read_log(path: str) -> MeasurementLog:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return loads_log(text, path)


def loads_log(text: str, name: str = "<log>") -> MeasurementLog:
    rows = {k: [] for k in STREAM_WIDTH}
    header = None
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        tag, _, rest = line.partition(" ")
        if tag == "HDR":
            try:
                header = json.loads(rest)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{name}:{n}: bad header: {exc.msg}") from exc
            continue
        if tag not in STREAM_WIDTH:
            raise ConfigError(f"{name}:{n}: unknown record type {tag!r}")
        vals = rest.split()
        if len(vals) != STREAM_WIDTH[tag]:
            raise ConfigError(f"{name}:{n}: {tag} expects {STREAM_WIDTH[tag]} values, got {len(vals)}")
        try:
            rows[tag].append([float(v) for v in vals])
        except ValueError as exc:
            raise ConfigError(f"{name}:{n}: {exc}") from exc
    if header is None or header.get("magic") != MAGIC:
        raise ConfigError(f"{name}: missing {MAGIC} header")
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{name}: unsupported format_version {header.get('format_version')!r}")
    if not rows["ENC"]:
        raise StreamMissingError(f"{name}: no encoder stream (ENC)")
    arr = {k: np.array(v, dtype=float).reshape(-1, STREAM_WIDTH[k]) for k, v in rows.items()}
    for k in ("ENC", "IMU", "GTP", "GTX"):
        if len(arr[k]) > 1 and np.any(np.diff(arr[k][:, 0]) <= 0):
            raise ConfigError(f"{name}: {k} timestamps are not strictly increasing")
    if len(arr["FEA"]) > 1 and np.any(np.diff(arr["FEA"][:, 0]) < 0):
        raise ConfigError(f"{name}: FEA timestamps decrease")
    features = None
    if len(arr["FEA"]):
        fa = arr["FEA"]
        features = FeatureFrames(fa[:, 0], fa[:, 1].astype(int), fa[:, 2].astype(int), fa[:, 3:5].copy())
    header = {k: v for k, v in header.items() if k not in ("magic",)}
    return MeasurementLog(header, arr["ENC"], arr["IMU"] if len(arr["IMU"]) else None, features,
                          arr["GTP"] if len(arr["GTP"]) else None, arr["GTX"] if len(arr["GTX"]) else None)
