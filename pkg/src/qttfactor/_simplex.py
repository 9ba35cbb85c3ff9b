"""Warm-started simplex pivots for small quantile regressions.

Starting from a basis of ``p`` interpolated observations, each pivot picks
the basic observation whose multiplier violates ``[tau - 1, tau]`` most,
releases it in the descent direction and performs an exact line search
over the residual breakpoints; the observation at the minimising
breakpoint enters the basis. Near a previous optimum this needs only a
handful of pivots, which is the common case inside the alternating factor
iterations.

Pivots run on a tiny deterministic perturbation of the response. The
alternating iterations produce structurally degenerate vertices (more than
``p`` exact zero residuals), on which an unperturbed simplex can cycle;
under the perturbation every pivot strictly decreases the objective. A
basis optimal for the perturbed problem is an optimal basis of the
original one, and the returned coefficients interpolate the original
response.
"""

import numpy as np
from numba import njit

EPS_DUAL = 1e-7
PERTURB = 1e-9
REFACTOR_EVERY = 32

OPTIMAL, SINGULAR, NO_DESCENT, UNBOUNDED, MAX_PIVOTS = 0, 1, 2, 3, 4


@njit(cache=True)
def _refactor(X, y, h, in_basis, Ainv, beta, r):
    n, p = X.shape
    Xh = np.empty((p, p))
    yh = np.empty(p)
    for k in range(p):
        Xh[k, :] = X[h[k], :]
        yh[k] = y[h[k]]
    # Hadamard ratio: |det| relative to the product of the row norms
    scale = 1.0
    for k in range(p):
        scale *= max(np.sqrt(np.sum(Xh[k] ** 2)), 1e-300)
    if np.abs(np.linalg.det(Xh)) < 1e-12 * scale:
        return False
    Ainv[:, :] = np.linalg.inv(Xh)
    beta[:] = Ainv @ yh
    for t in range(n):
        if in_basis[t]:
            r[t] = 0.0
        else:
            acc = y[t]
            for k in range(p):
                acc -= X[t, k] * beta[k]
            r[t] = acc
    return True


@njit(cache=True)
def _pivot_one(X, y0, tau, h, max_pivots):
    n, p = X.shape
    ymax = 0.0
    for t in range(n):
        ymax = max(ymax, abs(y0[t]))
    eps = PERTURB * (1.0 + ymax)
    y = np.empty(n)
    for t in range(n):
        y[t] = y0[t] + eps * (((t + 1) * 0.6180339887498949) % 1.0 - 0.5)
    in_basis = np.zeros(n, dtype=np.bool_)
    for k in range(p):
        in_basis[h[k]] = True
    beta = np.zeros(p)
    Ainv = np.empty((p, p))
    r = np.empty(n)
    c = np.empty(n)
    g = np.empty(p)
    a = np.empty(p)
    d = np.empty(p)
    bp = np.empty(n)
    wt = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    if not _refactor(X, y, h, in_basis, Ainv, beta, r):
        return beta, SINGULAR
    for it in range(max_pivots + 1):
        if it > 0 and it % REFACTOR_EVERY == 0:
            if not _refactor(X, y, h, in_basis, Ainv, beta, r):
                return beta, SINGULAR
        g[:] = 0.0
        for t in range(n):
            if in_basis[t]:
                continue
            psi = tau - 1.0 if r[t] < 0.0 else tau
            for k in range(p):
                g[k] += X[t, k] * psi
        # a = -Ainv' g
        j = -1
        worst = EPS_DUAL
        for k in range(p):
            acc = 0.0
            for q in range(p):
                acc -= Ainv[q, k] * g[q]
            a[k] = acc
            v = max(acc - tau, tau - 1.0 - acc)
            if v > worst:
                worst = v
                j = k
        if j < 0:
            Xh = np.empty((p, p))
            yh = np.empty(p)
            for k in range(p):
                Xh[k, :] = X[h[k], :]
                yh[k] = y0[h[k]]
            return np.linalg.solve(Xh, yh), OPTIMAL
        if it == max_pivots:
            break
        sigma = -1.0 if a[j] > tau else 1.0
        for k in range(p):
            d[k] = sigma * Ainv[k, j]
        # slope of the objective along beta + s d at s = 0+
        slope = tau if sigma < 0 else 1.0 - tau
        m = 0
        for t in range(n):
            if in_basis[t]:
                continue
            ct = 0.0
            for k in range(p):
                ct += X[t, k] * d[k]
            c[t] = ct
            rt = r[t]
            if rt > 0.0 or (rt == 0.0 and ct < 0.0):
                slope -= tau * ct
            else:
                slope -= (tau - 1.0) * ct
            if ct != 0.0:
                s = rt / ct
                if s > 0.0:
                    bp[m] = s
                    wt[m] = abs(ct)
                    idx[m] = t
                    m += 1
        if slope >= -1e-12 or m == 0:
            return beta, NO_DESCENT
        # walk breakpoints in increasing order by repeated selection
        enter = -1
        step = 0.0
        lo = 0
        while lo < m:
            best = lo
            for q in range(lo + 1, m):
                if bp[q] < bp[best]:
                    best = q
            bp[lo], bp[best] = bp[best], bp[lo]
            wt[lo], wt[best] = wt[best], wt[lo]
            idx[lo], idx[best] = idx[best], idx[lo]
            slope += wt[lo]
            if slope >= 0.0:
                enter = idx[lo]
                step = bp[lo]
                break
            lo += 1
        if enter < 0:
            return beta, UNBOUNDED
        leave = h[j]
        for k in range(p):
            beta[k] += step * d[k]
        for t in range(n):
            if not in_basis[t]:
                r[t] -= step * c[t]
        r[enter] = 0.0
        r[leave] = -step * sigma
        in_basis[leave] = False
        in_basis[enter] = True
        h[j] = enter
        # row j of the basis matrix replaced: rank-one update of its inverse
        ce = c[enter] * sigma
        u = np.empty(p)
        for q in range(p):
            acc = 0.0
            for k in range(p):
                acc += X[enter, k] * Ainv[k, q]
            u[q] = acc
        u[j] -= 1.0
        col = Ainv[:, j].copy()
        for k in range(p):
            for q in range(p):
                Ainv[k, q] -= col[k] * u[q] / ce
    return beta, MAX_PIVOTS


@njit(cache=True)
def pivot_batch_shared(X, Y, tau, basis, max_pivots):
    B = Y.shape[0]
    p = X.shape[1]
    beta = np.zeros((B, p))
    status = np.zeros(B, dtype=np.int64)
    for b in range(B):
        h = basis[b].copy()
        bb, st = _pivot_one(X, Y[b], tau, h, max_pivots)
        beta[b] = bb
        status[b] = st
        basis[b] = h
    return beta, status


@njit(cache=True)
def pivot_batch(X, Y, tau, basis, max_pivots):
    B = Y.shape[0]
    p = X.shape[2]
    beta = np.zeros((B, p))
    status = np.zeros(B, dtype=np.int64)
    for b in range(B):
        h = basis[b].copy()
        bb, st = _pivot_one(X[b], Y[b], tau, h, max_pivots)
        beta[b] = bb
        status[b] = st
        basis[b] = h
    return beta, status


@njit(cache=True)
def _greedy_one(X, order, out):
    n, p = X.shape
    Q = np.zeros((p, p))
    m = 0
    for q in range(n):
        t = order[q]
        v = X[t].copy()
        nrm0 = np.sqrt(np.sum(v * v))
        if nrm0 == 0.0:
            continue
        for k in range(m):
            v -= np.dot(Q[k], v) * Q[k]
        nrm = np.sqrt(np.sum(v * v))
        if nrm > 1e-8 * nrm0:
            Q[m] = v / nrm
            out[m] = t
            m += 1
            if m == p:
                return True
    return False


@njit(cache=True)
def _greedy_batch(X, order):
    B = order.shape[0]
    p = X.shape[-1]
    out = np.full((B, p), -1, dtype=np.int64)
    for b in range(B):
        Xb = X[0] if X.shape[0] == 1 else X[b]
        if not _greedy_one(Xb, order[b], out[b]):
            out[b, :] = -1
    return out


def independent_rows(X, order):
    """First ``p`` linearly independent rows of each design, scanning in ``order``.

    ``X`` is (n, p) or (B, n, p); ``order`` is (B, n). Rows of the result are
    -1 where the design has rank below ``p``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    return _greedy_batch(X, np.ascontiguousarray(order, dtype=np.int64))


def pivot(X, Y, tau, basis, max_pivots):
    """Run simplex pivots from ``basis`` (modified in place).

    Returns ``(beta, status)``; status ``OPTIMAL`` certifies the KKT
    conditions at the final basis.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.int64)
    if X.ndim == 2:
        return pivot_batch_shared(X, Y, float(tau), basis, int(max_pivots))
    return pivot_batch(X, Y, float(tau), basis, int(max_pivots))
