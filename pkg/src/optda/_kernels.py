"""Compiled Taylor-series kernels for bilinear ODEs.

All kernels work with normalized Taylor coefficients ``a[n] = D^n v / n!``,
which obey

    a[n] = ( -A a[n-1] - sum_{j<n} B(a[j], a[n-1-j]) + [n == 1] f ) / n.

The bilinear form enters only through its symmetric part, so kernels take
the *folded* triple list ``(p, q, o, s)`` with ``p <= q`` meaning

    B(x, y) + B(y, x) = sum s * (x[p] y[q] + x[q] y[p])   (into row o)
    B(x, x)           = sum s *  x[p] x[q]

System arrays are passed positionally as
``(a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius)``.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _pair_sum(x, y, fp, fq, fo, fs, out, scale):
    # out += scale * (B(x, y) + B(y, x))
    for e in range(fp.shape[0]):
        p = fp[e]
        q = fq[e]
        out[fo[e]] += scale * fs[e] * (x[p] * y[q] + x[q] * y[p])


@njit(cache=True)
def _square(x, fp, fq, fo, fs, out, scale):
    # out += scale * B(x, x)
    for e in range(fp.shape[0]):
        out[fo[e]] += scale * fs[e] * x[fp[e]] * x[fq[e]]


@njit(cache=True)
def series(v, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f):
    """Normalized Taylor coefficients a[0..nmax] of the flow at ``v``."""
    d = v.shape[0]
    a = np.zeros((nmax + 1, d))
    a[0, :] = v
    for n in range(1, nmax + 1):
        acc = a[n]
        for e in range(a_rows.shape[0]):
            acc[a_rows[e]] -= a_vals[e] * a[n - 1, a_cols[e]]
        for j in range(n):
            m = n - 1 - j
            if j > m:
                break
            if j < m:
                _pair_sum(a[j], a[m], fp, fq, fo, fs, acc, -1.0)
            else:
                _square(a[j], fp, fq, fo, fs, acc, -1.0)
        if n == 1:
            for i in range(d):
                acc[i] += f[i]
        inv = 1.0 / n
        for i in range(d):
            acc[i] *= inv
    return a


@njit(cache=True)
def tangent_series(a, W, a_rows, a_cols, a_vals, fp, fq, fo, fs):
    """Directional derivatives b[n] = (d a[n] / dv) W for a (d, m) block W."""
    nmax = a.shape[0] - 1
    d, m = W.shape
    b = np.zeros((nmax + 1, d, m))
    b[0] = W
    for n in range(1, nmax + 1):
        acc = b[n]
        for e in range(a_rows.shape[0]):
            r = a_rows[e]
            c = a_cols[e]
            val = a_vals[e]
            for col in range(m):
                acc[r, col] -= val * b[n - 1, c, col]
        for j in range(n):
            bj = b[j]
            am = a[n - 1 - j]
            for e in range(fp.shape[0]):
                p = fp[e]
                q = fq[e]
                o = fo[e]
                s = fs[e]
                ap = am[p]
                aq = am[q]
                for col in range(m):
                    acc[o, col] -= s * (bj[p, col] * aq + bj[q, col] * ap)
        inv = 1.0 / n
        for i in range(d):
            for col in range(m):
                acc[i, col] *= inv
    return b


@njit(cache=True)
def _horner(a, t):
    nmax = a.shape[0] - 1
    y = a[nmax].copy()
    for n in range(nmax - 1, -1, -1):
        y *= t
        y += a[n]
    return y


@njit(cache=True)
def _horner_block(b, t):
    nmax = b.shape[0] - 1
    y = b[nmax].copy()
    for n in range(nmax - 1, -1, -1):
        y *= t
        y += b[n]
    return y


@njit(cache=True)
def _norm(y):
    s = 0.0
    for i in range(y.shape[0]):
        s += y[i] * y[i]
    return np.sqrt(s)


@njit(cache=True)
def _project(y, radius):
    n = _norm(y)
    if n > radius:
        return y * (radius / n), n
    return y, n


@njit(cache=True)
def _project_jac_block(y, n, radius, W):
    # Jacobian of the ball projection at pre-image y (norm n > radius), applied to W.
    # It is symmetric, so this also serves as its transpose.
    d, m = W.shape
    out = np.empty_like(W)
    scale = radius / n
    for col in range(m):
        dot = 0.0
        for i in range(d):
            dot += y[i] * W[i, col]
        dot /= n * n
        for i in range(d):
            out[i, col] = scale * (W[i, col] - y[i] * dot)
    return out


@njit(cache=True)
def _project_jac_vec(y, n, radius, w):
    scale = radius / n
    dot = 0.0
    for i in range(y.shape[0]):
        dot += y[i] * w[i]
    dot /= n * n
    return scale * (w - y * dot)


@njit(cache=True)
def step(v, t, nmax, project, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    a = series(v, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f)
    y = _horner(a, t)
    if project:
        y, _ = _project(y, radius)
    return y


@njit(cache=True)
def propagate(v, dts, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    """Apply projected Taylor steps of the given sizes in order."""
    y = v.copy()
    for s in range(dts.shape[0]):
        y = step(y, dts[s], nmax, True, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius)
    return y


@njit(cache=True)
def propagate_tangent(v, W, dts, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    y = v.copy()
    T = W.copy()
    for s in range(dts.shape[0]):
        a = series(y, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f)
        b = tangent_series(a, T, a_rows, a_cols, a_vals, fp, fq, fo, fs)
        ypre = _horner(a, dts[s])
        T = _horner_block(b, dts[s])
        y, n = _project(ypre, radius)
        if n > radius:
            T = _project_jac_block(ypre, n, radius, T)
    return y, T


@njit(cache=True)
def adjoint_step(v, t, ybar, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    """Pull the cotangent ``ybar`` of one projected step back to its start ``v``."""
    a = series(v, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f)
    ypre = _horner(a, t)
    n = _norm(ypre)
    if n > radius:
        ybar = _project_jac_vec(ypre, n, radius, ybar)
    d = v.shape[0]
    abar = np.zeros((nmax + 1, d))
    tn = 1.0
    for k in range(nmax + 1):
        abar[k] = tn * ybar
        tn *= t
    for k in range(nmax, 0, -1):
        g = abar[k] * (-1.0 / k)
        prev = abar[k - 1]
        for e in range(a_rows.shape[0]):
            prev[a_cols[e]] += a_vals[e] * g[a_rows[e]]
        for j in range(k):
            m = k - 1 - j
            if j > m:
                break
            aj = a[j]
            am = a[m]
            bj = abar[j]
            bm = abar[m]
            if j < m:
                for e in range(fp.shape[0]):
                    p = fp[e]
                    q = fq[e]
                    w = g[fo[e]] * fs[e]
                    bj[p] += w * am[q]
                    bj[q] += w * am[p]
                    bm[q] += w * aj[p]
                    bm[p] += w * aj[q]
            else:
                for e in range(fp.shape[0]):
                    p = fp[e]
                    q = fq[e]
                    w = g[fo[e]] * fs[e]
                    bj[p] += w * aj[q]
                    bj[q] += w * aj[p]
    return abar[0].copy()


@njit(cache=True)
def forward_obs(v, k, sub, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    """States at the k+1 observation times and the start state of every step.

    ``sub`` holds the step sizes covering one observation interval.
    """
    d = v.shape[0]
    ns = sub.shape[0]
    X = np.empty((k + 1, d))
    ck = np.empty((k * ns, d))
    X[0] = v
    y = v.copy()
    idx = 0
    for i in range(k):
        for s in range(ns):
            ck[idx] = y
            idx += 1
            y = step(y, sub[s], nmax, True, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius)
        X[i + 1] = y
    return X, ck


@njit(cache=True)
def forward_obs_many(V, k, sub, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    n, d = V.shape
    ns = sub.shape[0]
    X = np.empty((n, k + 1, d))
    for r in range(n):
        y = V[r].copy()
        X[r, 0] = y
        for i in range(k):
            for s in range(ns):
                y = step(y, sub[s], nmax, True, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius)
            X[r, i + 1] = y
    return X


@njit(cache=True)
def tangent_obs(v, W, k, sub, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    """Tangent block J Psi_{t_i}(v) W at every observation time, shape (k+1, d, m)."""
    d, m = W.shape
    TW = np.empty((k + 1, d, m))
    X = np.empty((k + 1, d))
    TW[0] = W
    X[0] = v
    y = v.copy()
    T = W.copy()
    for i in range(k):
        y, T = propagate_tangent(y, T, sub, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius)
        TW[i + 1] = T
        X[i + 1] = y
    return X, TW


@njit(cache=True)
def adjoint_obs(ck, inj, sub, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    """Return sum_i J Psi_{t_i}(v)' inj[i] by reverse sweep over checkpoints."""
    k = inj.shape[0] - 1
    ns = sub.shape[0]
    lam = inj[k].copy()
    idx = k * ns - 1
    for i in range(k, 0, -1):
        for s in range(ns - 1, -1, -1):
            lam = adjoint_step(ck[idx], sub[s], lam, nmax, a_rows, a_cols, a_vals,
                               fp, fq, fo, fs, f, radius)
            idx -= 1
        lam += inj[i - 1]
    return lam


@njit(cache=True)
def adjoint_steps(ck, dts, zbar, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    lam = zbar.copy()
    for s in range(dts.shape[0] - 1, -1, -1):
        lam = adjoint_step(ck[s], dts[s], lam, nmax, a_rows, a_cols, a_vals,
                           fp, fq, fo, fs, f, radius)
    return lam


@njit(cache=True)
def checkpoints(v, dts, nmax, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius):
    d = v.shape[0]
    ck = np.empty((dts.shape[0], d))
    y = v.copy()
    for s in range(dts.shape[0]):
        ck[s] = y
        y = step(y, dts[s], nmax, True, a_rows, a_cols, a_vals, fp, fq, fo, fs, f, radius)
    return y, ck
