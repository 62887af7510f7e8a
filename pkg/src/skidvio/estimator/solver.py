"""Damped Gauss-Newton over a keyed variable set with landmark elimination."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import SingularBlockWarning, SolverDivergedError
from .factors import key_dim, retract

LAMBDA_MIN = 1e-9
LAMBDA_MAX = 1e4
MARG_EIG_FLOOR = 1e-10
# cost changes below this are round-off
ABS_COST_TOL = 1e-14


@dataclass
class LinearSystem:
    H: np.ndarray          # state block
    b: np.ndarray          # gradient J^T r (state)
    H_sl: np.ndarray       # state x landmark coupling, (N, 3L)
    H_ll: np.ndarray       # (L, 3, 3)
    b_l: np.ndarray        # (L, 3)
    cost: float


class Layout:
    """Column layout of the free error-state dimensions."""

    def __init__(self, state_keys, lm_keys, free=None):
        free = free or {}
        self.state_keys = list(state_keys)
        self.lm_keys = list(lm_keys)
        self.lm_index = {k: i for i, k in enumerate(self.lm_keys)}
        self.free_idx = {}
        self.offset = {}
        n = 0
        for k in self.state_keys:
            mask = free.get(k)
            idx = np.arange(key_dim(k)) if mask is None else np.flatnonzero(mask)
            self.free_idx[k] = idx
            self.offset[k] = n
            n += len(idx)
        self.n_state = n

    def cols(self, key):
        o = self.offset[key]
        return slice(o, o + len(self.free_idx[key]))


def huber_weights(sq_norm, threshold):
    """IRLS weights and robust costs for squared whitened residual norms."""
    if threshold is None:
        return np.ones_like(sq_norm), sq_norm
    k2 = threshold * threshold
    norm = np.sqrt(sq_norm)
    inlier = sq_norm <= k2
    w = np.where(inlier, 1.0, threshold / np.maximum(norm, 1e-300))
    rho = np.where(inlier, sq_norm, 2.0 * threshold * norm - k2)
    return w, rho


def _scatter_sum(idx, vals, n):
    """Sum rows of vals (m, ...) into n bins given by idx (m,)."""
    vals = np.asarray(vals)
    shape = vals.shape[1:]
    c = int(np.prod(shape)) if shape else 1
    flat_idx = (idx[:, None] * c + np.arange(c)[None, :]).ravel()
    out = np.bincount(flat_idx, weights=vals.reshape(len(idx), c).ravel(), minlength=n * c)
    return out.reshape((n,) + shape)


class Problem:
    """Factors bound to a layout, with the visual terms pre-indexed for batch evaluation."""

    def __init__(self, factors, layout: Layout, huber=None):
        self.layout = layout
        self.huber = huber
        self.other = [f for f in factors if f.kind != "visual"]
        visual = [f for f in factors if f.kind == "visual"]
        self.n_visual = len(visual)
        if not visual:
            return
        self.ext = visual[0].extrinsics_OC
        pose_keys = list(dict.fromkeys(f.keys[0] for f in visual))
        pos = {k: i for i, k in enumerate(pose_keys)}
        self.pose_keys = pose_keys
        self.pidx = np.array([pos[f.keys[0]] for f in visual])
        lidx = [layout.lm_index.get(f.keys[1], -1) for f in visual]
        self.lidx = np.array(lidx)
        if np.any(self.lidx < 0):
            raise KeyError("visual factor references a landmark outside the layout")
        missing = [k for k in pose_keys if k not in layout.offset]
        if missing:
            raise KeyError(f"visual factor references poses outside the layout: {missing}")
        self.uv = np.array([f.uv for f in visual])
        self.inv_sigma = 1.0 / np.array([f.sigma for f in visual])
        self.pose_rows = np.concatenate([np.arange(layout.offset[k], layout.offset[k] + 6) for k in pose_keys])

    def _visual_eval(self, values, with_jacobians):
        from .factors import visual_batch
        poses = [values[k] for k in self.pose_keys]
        R = np.array([p.R for p in poses])
        t = np.array([p.position for p in poses])
        lm = np.array([values[k] for k in self.layout.lm_keys]).reshape(-1, 3)
        r, J_pose, J_lm, _ = visual_batch(R[self.pidx], t[self.pidx], lm[self.lidx], self.uv, self.ext,
                                          with_jacobians)
        r = r * self.inv_sigma[:, None]
        if with_jacobians:
            J_pose = J_pose * self.inv_sigma[:, None, None]
            J_lm = J_lm * self.inv_sigma[:, None, None]
        return r, J_pose, J_lm

    def cost(self, values) -> float:
        c = 0.0
        for f in self.other:
            rw = f.sqrt_info @ f.residual(values)
            c += 0.5 * float(rw @ rw)
        if self.n_visual:
            r, _, _ = self._visual_eval(values, False)
            c += 0.5 * float(np.sum(huber_weights(np.sum(r * r, axis=1), self.huber)[1]))
        return c

    def linearize(self, values) -> LinearSystem:
        layout = self.layout
        N = layout.n_state
        L = len(layout.lm_keys)
        H = np.zeros((N, N))
        b = np.zeros(N)
        H_sl = np.zeros((N, 3 * L))
        H_ll = np.zeros((L, 3, 3))
        b_l = np.zeros((L, 3))
        cost = 0.0
        for f in self.other:
            r, jacs = f.evaluate(values)
            W = f.sqrt_info
            rw = W @ r
            cost += 0.5 * float(rw @ rw)
            cols, blocks = [], []
            for k, J in zip(f.keys, jacs):
                idx = layout.free_idx.get(k)
                if idx is None or len(idx) == 0:
                    continue
                o = layout.offset[k]
                cols.append(np.arange(o, o + len(idx)))
                blocks.append(J[:, idx])
            if not cols:
                continue
            cols = np.concatenate(cols)
            Jw = W @ np.hstack(blocks)
            b[cols] += Jw.T @ rw
            H[np.ix_(cols, cols)] += Jw.T @ Jw
        if self.n_visual:
            r, J_pose, J_lm = self._visual_eval(values, True)
            w, rho = huber_weights(np.sum(r * r, axis=1), self.huber)
            cost += 0.5 * float(np.sum(rho))
            wJp = J_pose * w[:, None, None]
            wJl = J_lm * w[:, None, None]
            P = len(self.pose_keys)
            Hpp = _scatter_sum(self.pidx, np.einsum("nri,nrj->nij", wJp, J_pose), P)
            bp = _scatter_sum(self.pidx, np.einsum("nri,nr->ni", wJp, r), P)
            rows = self.pose_rows
            H[np.ix_(rows, rows)] += _block_diag(Hpp)
            b[rows] += bp.ravel()
            H_ll += _scatter_sum(self.lidx, np.einsum("nri,nrj->nij", wJl, J_lm), L)
            b_l += _scatter_sum(self.lidx, np.einsum("nri,nr->ni", wJl, r), L)
            Hpl = _scatter_sum(self.pidx * L + self.lidx, np.einsum("nri,nrj->nij", wJp, J_lm), P * L)
            H_sl[rows] += Hpl.reshape(P, L, 6, 3).transpose(0, 2, 1, 3).reshape(6 * P, 3 * L)
        return LinearSystem(H, b, H_sl, H_ll, b_l, cost)


def _block_diag(blocks):
    n, m, _ = blocks.shape
    out = np.zeros((n * m, n * m))
    for i in range(n):
        out[i * m:(i + 1) * m, i * m:(i + 1) * m] = blocks[i]
    return out


def evaluate_cost(values, factors, layout: Layout, huber=None) -> float:
    return Problem(factors, layout, huber).cost(values)


def linearize(values, factors, layout: Layout, huber=None) -> LinearSystem:
    return Problem(factors, layout, huber).linearize(values)


def _inv3(blocks):
    w, V = np.linalg.eigh(0.5 * (blocks + np.swapaxes(blocks, 1, 2)))
    w = np.maximum(w, MARG_EIG_FLOOR * np.maximum(1.0, w.max(axis=1, keepdims=True)))
    return np.einsum("lij,lj,lkj->lik", V, 1.0 / w, V)


def reduce_landmarks(sys: LinearSystem, damping: float = 0.0):
    """Schur-eliminate the landmark blocks: returns (H_red, b_red, H_ll_inv)."""
    H = sys.H.copy()
    b = sys.b.copy()
    L = sys.H_ll.shape[0]
    if damping > 0:
        H[np.diag_indices_from(H)] += damping * np.maximum(np.diag(sys.H), 1e-12)
    if L == 0:
        return H, b, np.zeros((0, 3, 3))
    H_ll = sys.H_ll.copy()
    if damping > 0:
        d = np.einsum("lii->li", H_ll)
        d += damping * np.maximum(d.copy(), 1e-12)
    inv = _inv3(H_ll)
    N = H.shape[0]
    Hsl = sys.H_sl.reshape(N, L, 3)
    tmp = np.einsum("nli,lij->nlj", Hsl, inv)
    H -= tmp.reshape(N, 3 * L) @ sys.H_sl.T
    b -= np.einsum("nlj,lj->n", tmp, sys.b_l)
    return 0.5 * (H + H.T), b, inv


def _solve_spd(H, rhs):
    d = np.sqrt(np.maximum(np.diag(H), 1e-300))
    Hs = H / d[:, None] / d[None, :]
    try:
        L = np.linalg.cholesky(Hs)
        y = np.linalg.solve(L.T, np.linalg.solve(L, rhs / d))
    except np.linalg.LinAlgError:
        y = np.linalg.lstsq(Hs, rhs / d, rcond=1e-14)[0]
    return y / d


def _apply(values, layout: Layout, dx, dl):
    new = dict(values)
    for k in layout.state_keys:
        idx = layout.free_idx[k]
        if len(idx) == 0:
            continue
        full = np.zeros(key_dim(k))
        full[idx] = dx[layout.cols(k)]
        new[k] = retract(k, values[k], full)
    for i, k in enumerate(layout.lm_keys):
        new[k] = values[k] + dl[i]
    return new


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    costs: list


def solve(values, factors, layout: Layout, max_iterations=10, convergence_tol=1e-6,
          initial_damping=1e-4, huber=None):
    """Levenberg-style damped Gauss-Newton. Returns (values, report)."""
    lam = initial_damping
    problem = Problem(factors, layout, huber)
    sys = problem.linearize(values)
    cost0 = sys.cost
    costs = [sys.cost]
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        rejects = 0
        accepted = False
        while True:
            H_red, b_red, inv = reduce_landmarks(sys, lam)
            dx = _solve_spd(H_red, -b_red)
            if sys.H_ll.shape[0]:
                N = len(dx)
                L = sys.H_ll.shape[0]
                rhs = -sys.b_l - np.einsum("nli,n->li", sys.H_sl.reshape(N, L, 3), dx)
                dl = np.einsum("lij,lj->li", inv, rhs)
            else:
                dl = np.zeros((0, 3))
            predicted = -(b_red @ dx) - 0.5 * dx @ (H_red @ dx)
            candidate = _apply(values, layout, dx, dl)
            new_cost = problem.cost(candidate)
            if np.isfinite(new_cost) and new_cost <= sys.cost:
                accepted = True
                break
            rejects += 1
            if predicted <= convergence_tol * sys.cost + ABS_COST_TOL or not np.any(dx):
                break
            if rejects >= 5:
                raise SolverDivergedError(f"cost increased for {rejects} consecutive damping escalations")
            lam = min(lam * 10.0, LAMBDA_MAX)
        if not accepted:
            converged = True
            break
        decrease = sys.cost - new_cost
        values = candidate
        lam = max(lam / 10.0, LAMBDA_MIN)
        sys = problem.linearize(values)
        costs.append(sys.cost)
        if decrease <= convergence_tol * costs[-2] + ABS_COST_TOL:
            converged = True
            break
    return values, SolveReport(it, cost0, sys.cost, converged, costs), sys


def marginalize(hessian, gradient, marg_indices):
    """Schur complement of the marginalized indices: (Lambda_marg, g_marg)."""
    H = np.asarray(hessian, dtype=float)
    g = np.asarray(gradient, dtype=float)
    n = H.shape[0]
    m = np.zeros(n, dtype=bool)
    m[np.asarray(marg_indices, dtype=int)] = True
    r = ~m
    Hmm = 0.5 * (H[np.ix_(m, m)] + H[np.ix_(m, m)].T)
    Hrm = H[np.ix_(r, m)]
    if Hmm.size == 0:
        return H[np.ix_(r, r)].copy(), g[r].copy()
    w, V = np.linalg.eigh(Hmm)
    if w.min() < MARG_EIG_FLOOR:
        warnings.warn(f"marginalized block has eigenvalue {w.min():.3g} below {MARG_EIG_FLOOR}; flooring",
                      SingularBlockWarning, stacklevel=2)
        w = np.maximum(w, MARG_EIG_FLOOR)
    Hmm_inv = (V / w) @ V.T
    K = Hrm @ Hmm_inv
    lam = H[np.ix_(r, r)] - K @ Hrm.T
    gm = g[r] - K @ g[m]
    return 0.5 * (lam + lam.T), gm
