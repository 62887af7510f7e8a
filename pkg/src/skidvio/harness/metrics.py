"""Trajectory error metrics: final drift, ATE RMSE, RPE by travelled distance."""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation
from scipy.spatial.transform import Slerp

RPE_LENGTHS_SHORT = (9.0, 18.0, 27.0, 36.0, 45.0)
RPE_LENGTHS_LONG = (15.0, 30.0, 45.0, 60.0, 75.0)
ALIGNMENT = "first-pose"


def _rot(quats) -> ScipyRotation:
    return ScipyRotation.from_quat(np.asarray(quats, dtype=float))


def interpolate_truth(gt_t, gt_quats, gt_pos, t):
    """Ground truth at times t: linear in position, spherical-linear in rotation."""
    gt_t = np.asarray(gt_t, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.min() < gt_t[0] - 1e-9 or t.max() > gt_t[-1] + 1e-9:
        raise ValueError("query times fall outside the ground-truth span")
    tc = np.clip(t, gt_t[0], gt_t[-1])
    pos = np.column_stack([np.interp(tc, gt_t, gt_pos[:, i]) for i in range(3)])
    quats = Slerp(gt_t, _rot(gt_quats))(tc).as_quat()
    return quats, pos


def align_first_pose(est_quats, est_pos, ref_quat, ref_pos):
    """Rigidly move the estimate so its first pose coincides with the reference pose."""
    R_est = _rot(est_quats)
    T_rot = _rot(ref_quat) * R_est[0].inv()
    pos = T_rot.apply(np.asarray(est_pos) - est_pos[0]) + ref_pos
    return (T_rot * R_est).as_quat(), pos


def _aligned(est_t, est_quats, est_pos, gt_t, gt_quats, gt_pos):
    g_q, g_p = interpolate_truth(gt_t, gt_quats, gt_pos, est_t)
    e_q, e_p = align_first_pose(est_quats, est_pos, g_q[0], g_p[0])
    return e_q, e_p, g_q, g_p


def ate(est_t, est_quats, est_pos, gt_t, gt_quats, gt_pos) -> dict:
    """Translation and rotation RMSE after first-pose alignment."""
    e_q, e_p, g_q, g_p = _aligned(est_t, est_quats, est_pos, gt_t, gt_quats, gt_pos)
    d = e_p - g_p
    ang = (_rot(g_q).inv() * _rot(e_q)).magnitude()
    return {"translation_rmse": float(np.sqrt(np.mean(np.sum(d * d, axis=1)))),
            "rotation_rmse_deg": float(np.degrees(np.sqrt(np.mean(ang * ang)))),
            "alignment": ALIGNMENT}


def final_drift(est_t, est_quats, est_pos, gt_t, gt_quats, gt_pos) -> dict:
    e_q, e_p, g_q, g_p = _aligned(est_t, est_quats, est_pos, gt_t, gt_quats, gt_pos)
    d = e_p[-1] - g_p[-1]
    return {"norm": float(np.linalg.norm(d)), "x": float(d[0]), "y": float(d[1]), "z": float(d[2])}


def rpe(est_t, est_quats, est_pos, gt_t, gt_quats, gt_pos, lengths=RPE_LENGTHS_SHORT) -> dict:
    """Mean relative translation error over pose pairs separated by each travelled distance.

    For each start pose i the partner j is the first pose whose ground-truth
    path distance from i reaches the segment length. The error is the
    translation of (gt_i^-1 gt_j)^-1 (est_i^-1 est_j).
    """
    g_q, g_p = interpolate_truth(gt_t, gt_quats, gt_pos, est_t)
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(g_p, axis=0), axis=1))])
    Rg = _rot(g_q)
    Re = _rot(est_quats)
    est_pos = np.asarray(est_pos, dtype=float)
    out = {}
    for L in lengths:
        j = np.searchsorted(dist, dist + L, side="left")
        i = np.flatnonzero(j < len(dist))
        if len(i) == 0:
            out[float(L)] = {"mean": None, "count": 0}
            continue
        j = j[i]
        rel_g_R = Rg[i].inv() * Rg[j]
        rel_g_p = Rg[i].inv().apply(g_p[j] - g_p[i])
        rel_e_p = Re[i].inv().apply(est_pos[j] - est_pos[i])
        err = rel_g_R.inv().apply(rel_e_p - rel_g_p)
        out[float(L)] = {"mean": float(np.mean(np.linalg.norm(err, axis=1))), "count": int(len(i))}
    return out
