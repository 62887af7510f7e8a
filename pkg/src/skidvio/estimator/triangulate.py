"""Multi-view landmark initialization: DLT followed by Gauss-Newton refinement."""
from __future__ import annotations

import numpy as np

from ..geom import Pose
from .factors import camera_frame

MIN_BASELINE = 0.05
MIN_DEPTH = 0.1
MAX_RMS_SIGMAS = 3.0
GN_ITERATIONS = 10


def triangulate(uvs, poses, extrinsics_OC: Pose, sigma_pixel: float, min_baseline: float = MIN_BASELINE,
                min_depth: float = MIN_DEPTH):
    """Landmark position from normalized observations uvs (N,2) at odometer poses.

    Returns the 3-vector, or None when the geometry is degenerate, a depth is
    below min_depth, or the refined reprojection rms exceeds 3 sigma_pixel.
    """
    uvs = np.asarray(uvs, dtype=float).reshape(-1, 2)
    if len(uvs) < 2 or len(uvs) != len(poses):
        return None
    cams = [camera_frame(p, extrinsics_OC) for p in poses]
    centers = np.array([c[1] for c in cams])
    if np.max(np.linalg.norm(centers - centers[0], axis=1)) <= min_baseline:
        return None
    rows = []
    for (R_C, p_C), (u, v) in zip(cams, uvs):
        P = np.hstack([R_C.T, (-R_C.T @ p_C)[:, None]])
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.array(rows))
    X = Vt[-1]
    if abs(X[3]) < 1e-12:
        return None
    p = X[:3] / X[3]
    for _ in range(GN_ITERATIONS):
        r_all, J_all = [], []
        for (R_C, p_C), uv in zip(cams, uvs):
            pc = R_C.T @ (p - p_C)
            if pc[2] <= 1e-6:
                return None
            r_all.append(uv - pc[:2] / pc[2])
            dpi = np.array([[1 / pc[2], 0, -pc[0] / pc[2] ** 2], [0, 1 / pc[2], -pc[1] / pc[2] ** 2]])
            J_all.append(-dpi @ R_C.T)
        r = np.concatenate(r_all)
        J = np.vstack(J_all)
        try:
            dp = np.linalg.solve(J.T @ J, -J.T @ r)
        except np.linalg.LinAlgError:
            return None
        p = p + dp
        if np.linalg.norm(dp) < 1e-12 * max(1.0, np.linalg.norm(p)):
            break
    depths = np.array([(R_C.T @ (p - p_C))[2] for R_C, p_C in cams])
    if np.any(depths < min_depth):
        return None
    res = np.concatenate([uv - (R_C.T @ (p - p_C))[:2] / (R_C.T @ (p - p_C))[2] for (R_C, p_C), uv in zip(cams, uvs)])
    if np.sqrt(np.mean(res ** 2)) > MAX_RMS_SIGMAS * sigma_pixel:
        return None
    return p
