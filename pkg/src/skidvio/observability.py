"""Constraint-based identifiability analysis of the skid-steer kinematic parameters.

Inferred measurements (camera yaw rate, up-to-scale odometer-frame camera
velocity, wheel speeds) enter three constraints per instant,

    c_x = w y_C + s v_x - w Y_l - beta_l dY o_l
    c_y = -w x_C + s v_y + w X_v
    c_w = w + beta_l o_l - beta_r o_r

whose stacked parameter derivatives form the observability matrix. Each
variant differs in which parameters are free and whether the scale s is
present. Rank and kernel of that matrix decide local identifiability.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TooFewSamplesError, VariantMismatchError
from .geom import Pose, skew_batch
from .kinematics import KinematicParams, _as_params, inverse_kinematics

VARIANTS = ("mono5", "mono3", "vio5", "ext_p", "ext_theta")
COLUMNS = {
    "mono5": ("Y_l", "dY", "X_v", "beta_l", "beta_r", "s"),
    "mono3": ("Y_l", "dY", "X_v", "s"),
    "vio5": ("Y_l", "dY", "X_v", "beta_l", "beta_r"),
    "ext_p": ("Y_l", "dY", "X_v", "beta_l", "beta_r", "x_C", "y_C", "z_C"),
    "ext_theta": ("Y_l", "dY", "X_v", "beta_l", "beta_r", "dtheta_1", "dtheta_2", "dtheta_3"),
}
USES_IMU = {"mono5": False, "mono3": False, "vio5": True, "ext_p": True, "ext_theta": True}

DEGENERACY_CLASSES = ("none", "zero-o_l", "zero-o_r", "zero-omega", "all-constant", "proportional-wheels",
                      "omega-proportional-o_l")
RANK_TOL = 1e-8
ALIGN_DEG = 1.0
CONSTANT_TOL = 1e-3
PROPORTIONAL_TOL = 1e-3
ZERO_TOL = 1e-6
MIN_CLASSIFY_SAMPLES = 10


@dataclass
class InferredMotion:
    t: np.ndarray
    omega: np.ndarray        # yaw rate of the odometer frame (N,)
    v: np.ndarray            # camera velocity in the odometer frame, divided by s (N, 3)
    v_C: np.ndarray          # the same velocity in the camera frame (N, 3)
    o_l: np.ndarray
    o_r: np.ndarray
    scale: float = 1.0
    use_imu: bool = True

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        if len(self.t) < 2:
            raise TooFewSamplesError("inferred motion needs at least 2 samples")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("sample times must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def subset(self, sel) -> "InferredMotion":
        return InferredMotion(self.t[sel], self.omega[sel], self.v[sel], self.v_C[sel], self.o_l[sel],
                              self.o_r[sel], self.scale, self.use_imu)


@dataclass
class ParamSet:
    variant: str
    xi: KinematicParams
    extrinsics_OC: Pose
    s: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise VariantMismatchError(f"unknown variant {self.variant!r}")
        self.xi = _as_params(self.xi)
        if USES_IMU[self.variant] and self.s != 1.0:
            raise VariantMismatchError(f"variant {self.variant} has no scale factor; s must be 1")

    @property
    def beta_l(self) -> float:
        return self.xi.alpha_l / self.xi.delta_y

    @property
    def beta_r(self) -> float:
        return self.xi.alpha_r / self.xi.delta_y

    def values(self) -> np.ndarray:
        x = self.xi
        p = self.extrinsics_OC.position
        table = {"Y_l": x.Y_l, "dY": x.delta_y, "X_v": x.X_v, "beta_l": self.beta_l, "beta_r": self.beta_r,
                 "s": self.s, "x_C": p[0], "y_C": p[1], "z_C": p[2], "dtheta_1": 0.0, "dtheta_2": 0.0,
                 "dtheta_3": 0.0}
        return np.array([table[c] for c in COLUMNS[self.variant]])


@dataclass
class ObservabilityReport:
    variant: str
    matrix: np.ndarray
    rank: int
    singular_values: np.ndarray
    nullspace_basis: np.ndarray
    matched_null_directions: list = field(default_factory=list)
    candidate_angles: dict = field(default_factory=dict)
    degeneracy_class: tuple = ("none",)

    @property
    def nullity(self) -> int:
        return self.matrix.shape[1] - self.rank

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "rank": self.rank,
            "nullity": self.nullity,
            "columns": list(COLUMNS.get(self.variant, ())),
            "singular_values": [float(x) for x in self.singular_values],
            "nullspace_basis": self.nullspace_basis.T.tolist(),
            "matched_null_directions": [[k, float(a)] for k, a in self.matched_null_directions],
            "candidate_angles_deg": {k: float(a) for k, a in self.candidate_angles.items()},
            "degeneracy_class": list(self.degeneracy_class),
        }


def infer_motion(traj, xi_true, rig, use_imu: bool = True, scale: float = 1.0, stride: int = 1) -> InferredMotion:
    """Noiseless inferred measurements along a simulated trajectory.

    The odometer twist is taken from the trajectory's body velocities
    (v_x, v_y, yaw rate). The scale divides the camera velocity only when no
    IMU is present.
    """
    s = 1.0 if use_imu else float(scale)
    if s <= 0:
        raise ValueError("scale must be positive")
    sel = slice(None, None, stride)
    vel = traj.velocities[sel]
    w = vel[:, 2]
    p_C = rig.extrinsics_OC.position
    R_OC = rig.extrinsics_OC.R
    # camera velocity in the odometer frame: v_O + w x p_C
    v_cam = np.column_stack([vel[:, 0] - w * p_C[1], vel[:, 1] + w * p_C[0], np.zeros(len(w))])
    v = v_cam / s
    o_l, o_r = inverse_kinematics(xi_true, vel[:, 0], w)
    return InferredMotion(traj.t[sel], w.copy(), v, v @ R_OC, np.asarray(o_l, float), np.asarray(o_r, float),
                          s, use_imu)


def constraint_residuals(motion: InferredMotion, params: ParamSet) -> np.ndarray:
    """(N, 3) values of (c_x, c_y, c_w) at the parameter point; zero for consistent data."""
    x = params.xi
    p = params.extrinsics_OC.position
    s = params.s if not motion.use_imu else 1.0
    v = motion.v
    w = motion.omega
    if params.variant == "mono3":
        c_x = w * p[1] + s * v[:, 0] - w * x.Y_l - motion.o_l
        c_w = w + (motion.o_l - motion.o_r) / x.delta_y
    else:
        c_x = w * p[1] + s * v[:, 0] - w * x.Y_l - params.beta_l * x.delta_y * motion.o_l
        c_w = w + params.beta_l * motion.o_l - params.beta_r * motion.o_r
    c_y = -w * p[0] + s * v[:, 1] + w * x.X_v
    return np.column_stack([c_x, c_y, c_w])


def _check(motion: InferredMotion, params: ParamSet):
    if params.variant not in VARIANTS:
        raise VariantMismatchError(f"unknown variant {params.variant!r}")
    if USES_IMU[params.variant] != motion.use_imu:
        need = "with" if USES_IMU[params.variant] else "without"
        raise VariantMismatchError(f"variant {params.variant} needs motion inferred {need} an IMU")
    if not motion.use_imu and abs(motion.scale - params.s) > 1e-12 * max(1.0, params.s):
        raise VariantMismatchError("motion scale and parameter scale differ")


def _stack(blocks) -> np.ndarray:
    """Interleave per-sample rows (c_x, c_y, c_w) given three (N, n) arrays."""
    n = blocks[0].shape
    out = np.empty((n[0], 3, n[1]))
    for r, b in enumerate(blocks):
        out[:, r, :] = b
    return out.reshape(3 * n[0], n[1])


def _rotation_block(motion: InferredMotion, R_OC: np.ndarray) -> np.ndarray:
    """-R_OC [v_C]x per sample, (N, 3, 3); rows 0 and 1 feed c_x and c_y."""
    return -np.einsum("ij,njk->nik", R_OC, skew_batch(motion.v_C))


def build_matrix(motion: InferredMotion, params: ParamSet, form: str = "pre") -> np.ndarray:
    """Stacked 3-row blocks D(t_i), one per sample.

    form "pre" is the direct constraint derivative. form "reduced" applies the
    rank-preserving column operations that expose the degenerate directions
    (mono3, vio5, ext_theta); mono5 and ext_p have no reduced form and return
    the direct matrix.
    """
    _check(motion, params)
    if form not in ("pre", "reduced"):
        raise ValueError("form must be 'pre' or 'reduced'")
    variant = params.variant
    x = params.xi
    dY, bl = x.delta_y, params.beta_l
    w, o_l, o_r, v = motion.omega, motion.o_l, motion.o_r, motion.v
    z = np.zeros_like(w)
    reduced = form == "reduced"

    if variant == "mono5":
        return _stack([np.column_stack([-w, -bl * o_l, z, -dY * o_l, z, v[:, 0]]),
                       np.column_stack([z, z, w, z, z, v[:, 1]]),
                       np.column_stack([z, z, z, o_l, -o_r, z])])
    if variant == "mono3":
        if reduced:
            return _stack([np.column_stack([-w, z, z, o_l]),
                           np.column_stack([z, z, w, z]),
                           np.column_stack([z, o_r - o_l, z, z])])
        return _stack([np.column_stack([-w, z, z, v[:, 0]]),
                       np.column_stack([z, z, w, v[:, 1]]),
                       np.column_stack([z, (o_r - o_l) / dY ** 2, z, z])])

    if reduced and variant != "ext_p":
        kin = [np.column_stack([-w, o_l, z, z, z]),
               np.column_stack([z, z, w, z, z]),
               np.column_stack([z, z, z, o_l, -o_r])]
    else:
        kin = [np.column_stack([-w, -bl * o_l, z, -dY * o_l, z]),
               np.column_stack([z, z, w, z, z]),
               np.column_stack([z, z, z, o_l, -o_r])]
    if variant == "vio5":
        return _stack(kin)
    if variant == "ext_p":
        return _stack([np.hstack([kin[0], np.column_stack([z, w, z])]),
                       np.hstack([kin[1], np.column_stack([-w, z, z])]),
                       np.hstack([kin[2], np.zeros((len(w), 3))])])
    rot = _rotation_block(motion, params.extrinsics_OC.R)
    return _stack([np.hstack([kin[0], rot[:, 0, :]]),
                   np.hstack([kin[1], rot[:, 1, :]]),
                   np.hstack([kin[2], np.zeros((len(w), 3))])])


def column_operations(params: ParamSet) -> np.ndarray:
    """T with build_matrix(reduced) == build_matrix(pre) @ T on consistent data."""
    n = len(COLUMNS[params.variant])
    T = np.eye(n)
    x = params.xi
    p = params.extrinsics_OC.position
    if params.variant == "mono3":
        T[1, 1] = x.delta_y ** 2
        T[:, 3] = 0.0
        T[3, 3] = params.s
        T[0, 3] = x.Y_l - p[1]
        T[2, 3] = x.X_v - p[0]
    elif params.variant in ("vio5", "ext_theta"):
        # col2 <- -col2 / beta_l, then col4 <- col4 + dY col2
        T[1, 1] = -1.0 / params.beta_l
        T[1, 3] = -x.delta_y / params.beta_l
    return T


def _alignment_deg(basis: np.ndarray, k: np.ndarray) -> float:
    k = np.asarray(k, dtype=float)
    nk = np.linalg.norm(k)
    if nk == 0 or basis.shape[1] == 0:
        return 90.0
    c = min(1.0, np.linalg.norm(basis.T @ k) / nk)
    return float(np.degrees(np.arccos(c)))


def _ratio(y, x) -> float:
    """Least-squares slope of y = c x through the origin."""
    d = float(x @ x)
    return float(x @ y) / d if d > 0 else 0.0


def candidate_vectors(variant: str, motion: InferredMotion = None, params: ParamSet = None):
    """Analytic kernel vectors as (label, degeneracy class or None, vector).

    Vectors are expressed in the columns of the form they are derived for:
    mono3, vio5 and ext_theta in the reduced form, mono5 and ext_p in the
    direct form. Free scalars are set to 1 and two-parameter families are
    listed as one vector per free scalar. A class of None marks a direction
    that is present for every motion.
    """
    e = lambda n, *idx: np.bincount(np.array(idx, dtype=int), minlength=n).astype(float)
    if variant == "mono5":
        if params is None:
            raise ValueError("mono5 kernel vector needs the parameter point")
        x = params.xi
        p = params.extrinsics_OC.position
        return [("scale-icr", None, np.array([x.Y_l - p[1], x.delta_y, x.X_v - p[0], 0.0, 0.0, params.s]))]
    r = _ratio(motion.o_l, motion.omega) if motion is not None else 1.0
    if variant == "mono3":
        return [("zero-o_l", "zero-o_l", e(4, 3)),
                ("zero-omega", "zero-omega", e(4, 2)),
                ("all-constant", "all-constant", e(4, 1)),
                ("proportional-wheels", "proportional-wheels", e(4, 1)),
                ("omega-proportional-o_l", "omega-proportional-o_l", np.array([r, 0.0, 0.0, 1.0]))]
    if variant == "vio5":
        return [("zero-o_l:rho1", "zero-o_l", e(5, 1)),
                ("zero-o_l:rho2", "zero-o_l", e(5, 3)),
                ("zero-o_r", "zero-o_r", e(5, 4)),
                ("zero-omega:rho1", "zero-omega", e(5, 0)),
                ("zero-omega:rho2", "zero-omega", e(5, 2)),
                ("all-constant", "all-constant", e(5, 2)),
                ("proportional-wheels", "proportional-wheels", e(5, 3)),
                ("omega-proportional-o_l", "omega-proportional-o_l", np.array([r, 1.0, 0.0, 0.0, 0.0]))]
    if variant == "ext_p":
        return [("k1", None, e(8, 0, 6)), ("k2", None, e(8, 2, 5)), ("k3", None, e(8, 7))]
    if variant == "ext_theta":
        return [("dtheta_3", None, e(8, 7))]
    raise VariantMismatchError(f"unknown variant {variant!r}")


def analyze(matrix, tol_ratio: float = RANK_TOL, candidates=None, variant: str = "") -> ObservabilityReport:
    """SVD rank and kernel, plus kernel membership of the candidate vectors."""
    M = np.asarray(matrix, dtype=float)
    if M.shape[0] < M.shape[1]:
        raise ValueError("observability matrix needs at least as many rows as columns")
    _, sv, Vt = np.linalg.svd(M, full_matrices=False)
    rank = int(np.sum(sv > tol_ratio * sv[0])) if sv[0] > 0 else 0
    basis = Vt[rank:].T
    angles = {}
    by_class = {}
    for label, cls, k in candidates or ():
        angles[label] = _alignment_deg(basis, k)
        if cls is not None:
            by_class.setdefault(cls, []).append(angles[label])
    matched = [(label, a) for label, a in angles.items() if a < ALIGN_DEG]
    flags = tuple(c for c in DEGENERACY_CLASSES if c in by_class and max(by_class[c]) < ALIGN_DEG)
    return ObservabilityReport(variant, M, rank, sv, basis, matched, angles, flags or ("none",))


def analyze_motion(motion: InferredMotion, params: ParamSet, form: str = None,
                   tol_ratio: float = RANK_TOL) -> ObservabilityReport:
    """build_matrix + analyze with the variant's candidate vectors, in the form they are derived for."""
    if form is None:
        form = "reduced" if params.variant in ("mono3", "vio5", "ext_theta") else "pre"
    M = build_matrix(motion, params, form)
    return analyze(M, tol_ratio, candidate_vectors(params.variant, motion, params), params.variant)


def _is_zero(x) -> bool:
    return float(np.max(np.abs(x))) < ZERO_TOL


def _is_constant(x) -> bool:
    return float(np.std(x)) / (abs(float(np.mean(x))) + 1e-6) < CONSTANT_TOL


def _is_proportional(y, x) -> bool:
    if _is_zero(x) or _is_zero(y):
        return False
    c = _ratio(y, x)
    return float(np.linalg.norm(y - c * x)) < PROPORTIONAL_TOL * float(np.linalg.norm(y))


def classify_motion(motion: InferredMotion) -> frozenset:
    """Degenerate-motion flags from the signals themselves (empty for general motion)."""
    if len(motion) < MIN_CLASSIFY_SAMPLES:
        raise TooFewSamplesError(f"classification needs at least {MIN_CLASSIFY_SAMPLES} samples")
    w, o_l, o_r = motion.omega, motion.o_l, motion.o_r
    flags = set()
    if _is_zero(o_l):
        flags.add("zero-o_l")
    if _is_zero(o_r):
        flags.add("zero-o_r")
    if _is_zero(w):
        flags.add("zero-omega")
    if all(_is_constant(x) for x in (w, o_l, o_r)):
        flags.add("all-constant")
    if _is_proportional(o_r, o_l):
        flags.add("proportional-wheels")
    if _is_proportional(w, o_l):
        flags.add("omega-proportional-o_l")
    return frozenset(flags)


@dataclass
class IdentifiabilityResult:
    variant: str
    labels: tuple
    initial_std: np.ndarray
    final_std: np.ndarray
    contraction: np.ndarray
    contracted: np.ndarray
    analytic: ObservabilityReport


EMPIRICAL_MODES = {"vio5": "vio_xi5", "mono3": "vo_icr3", "mono5": "vo_xi5"}


def empirical_identifiability(scenario, variant: str, min_contraction: float = 2.0,
                              fraction: float = 1.0) -> IdentifiabilityResult:
    """Run the estimator on a scenario and compare marginal-std contraction with the analytic verdict.

    scenario is a harness ScenarioConfig; its mode is replaced by the one
    matching the variant. Contraction is first-keyframe std over the std at
    the given fraction of the run.
    """
    from .harness.runner import run_scenario

    if variant not in EMPIRICAL_MODES:
        raise VariantMismatchError(f"no estimator mode for variant {variant!r}")
    scenario = scenario.with_mode(EMPIRICAL_MODES[variant])
    result, data = run_scenario(scenario, seed=scenario.seeds[0], keep_data=True)
    stds = np.array([r.xi_std for r in result.keyframes])
    free = np.flatnonzero(stds[0] > 0)
    end = max(1, int(round(fraction * (len(stds) - 1))))
    contraction = stds[0, free] / np.maximum(stds[end, free], 1e-300)
    labels = tuple(("X_v", "Y_l", "Y_r", "alpha_l", "alpha_r")[i] for i in free)

    # mono3 treats the wheels as unscaled, so its motion and parameters use alpha = 1
    xi = scenario.xi_true
    if variant == "mono3":
        xi = KinematicParams(*xi.as_array()[:3])
    motion = infer_motion(data.trajectory, xi, scenario.rig, use_imu=USES_IMU[variant], stride=10)
    report = analyze_motion(motion, ParamSet(variant, xi, scenario.rig.extrinsics_OC))
    return IdentifiabilityResult(variant, labels, stds[0, free], stds[end, free], contraction,
                                 contraction >= min_contraction, report)
