"""Full-batch MAP over every recorded factor, solved with scipy's Levenberg-Marquardt.

Independent of the sliding-window solver: no marginalization, no landmark
elimination, a different linear algebra path. Used as a consistency oracle.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import least_squares

from ..geom import small_rotation_right_jacobian
from .factors import key_dim, retract


def _chart_jacobian(key, delta):
    """d error(x_ref [+] delta) / d delta, with error the right perturbation of the factors."""
    D = np.eye(key_dim(key))
    if key[0] == "pose":
        D[0:3, 0:3] = small_rotation_right_jacobian(delta[0:3])
    return D


def batch_solve(values, factors, free=None, tol=1e-15, max_nfev=200):
    """Returns (optimized values, final cost, scipy result)."""
    free = free or {}
    keys = list(dict.fromkeys(k for f in factors for k in f.keys))
    cols = {}
    n = 0
    for k in keys:
        mask = free.get(k)
        idx = np.arange(key_dim(k)) if mask is None else np.flatnonzero(mask)
        cols[k] = (idx, np.arange(n, n + len(idx)))
        n += len(idx)
    rows = []
    m = 0
    for f in factors:
        d = f.dim
        rows.append(slice(m, m + d))
        m += d

    def unpack(z):
        out = {}
        deltas = {}
        for k in keys:
            idx, c = cols[k]
            full = np.zeros(key_dim(k))
            full[idx] = z[c]
            deltas[k] = full
            out[k] = retract(k, values[k], full)
        return out, deltas

    def fun(z):
        x, _ = unpack(z)
        r = np.empty(m)
        for f, sl in zip(factors, rows):
            r[sl] = f.sqrt_info @ f.residual(x)
        return r

    def jac(z):
        x, deltas = unpack(z)
        J = np.zeros((m, n))
        for f, sl in zip(factors, rows):
            _, jacs = f.evaluate(x)
            for k, Jk in zip(f.keys, jacs):
                idx, c = cols[k]
                if len(idx) == 0:
                    continue
                D = _chart_jacobian(k, deltas[k])
                J[sl, c] += f.sqrt_info @ (Jk @ D[:, idx])
        return J

    res = least_squares(fun, np.zeros(n), jac=jac, method="lm", xtol=tol, ftol=tol, gtol=tol, x_scale="jac",
                        max_nfev=max_nfev)
    x, _ = unpack(res.x)
    return x, 0.5 * float(res.fun @ res.fun), res
