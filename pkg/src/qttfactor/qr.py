"""Linear quantile regression: check loss, kernels and fitters.

Two fitters are exposed, each in a single-problem form (``fit_qr``,
``fit_sqr``) and a batched form (``solve_qr_batch``, ``solve_sqr_batch``)
that solves many small problems in one vectorised pass. The batched forms
are what the factor-model iterations call thousands of times.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._newton import newton_batch, newton_batch_shared
from ._simplex import independent_rows, pivot

__all__ = [
    "ConvergenceError",
    "QrProblem",
    "RankDeficientError",
    "SmoothingSpec",
    "check_loss",
    "fit_qr",
    "fit_sqr",
    "kernel_K",
    "kernel_k",
    "kernel_k_prime",
    "score_psi",
    "smoothed_loss",
    "solve_qr_batch",
    "solve_sqr_batch",
    "stationarity_gap",
]

TOL_STAT = 1e-6
TOL_GRAD = 1e-8
MAX_ITER = 200

# k(z) = KERNEL_SCALE * sum_j KERNEL_POLY[j] z^(2j) on |z| < 1
KERNEL_SCALE = 3465.0 / 8192.0
KERNEL_POLY = np.array([7.0, -105.0, 462.0, -858.0, 715.0, -221.0])
# odd antiderivative: int_0^z k = KERNEL_SCALE * sum_j KERNEL_ANTI[j] z^(2j+1)
KERNEL_ANTI = np.array([7.0, -35.0, 462.0 / 5.0, -858.0 / 7.0, 715.0 / 9.0, -221.0 / 11.0])
# derivative: k'(z) = KERNEL_SCALE * sum_j KERNEL_DERIV[j] z^(2j+1)
KERNEL_DERIV = np.array([-210.0, 1848.0, -5148.0, 5720.0, -2210.0])


class RankDeficientError(ValueError):
    """Design matrix is numerically rank deficient.

    ``column`` is the (0-based) index of the first column that is spanned
    by the columns before it.
    """

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap.

    ``gap`` holds the final duality gap (interior point) or gradient norm
    (smoothed Newton) so callers can judge how far off the iterate was.
    """

    def __init__(self, message, gap=None):
        super().__init__(message)
        self.gap = gap


@dataclass(frozen=True)
class QrProblem:
    design: np.ndarray
    response: np.ndarray
    tau: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.design, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.response, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError(f"design {X.shape} and response {y.shape} do not align")
        n, p = X.shape
        if p < 1 or n < p:
            raise ValueError(f"need n >= p >= 1, got n={n}, p={p}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("design and response must be finite")
        w = self.weights
        if w is not None:
            w = np.asarray(w, dtype=float).ravel()
            if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be a finite nonnegative vector of length n")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "weights", w)

    def weighted(self):
        """Return ``(X, y)`` with rows scaled by the weights (rho is positively homogeneous)."""
        if self.weights is None:
            return self.design, self.response
        w = self.weights
        return self.design * w[:, None], self.response * w


@dataclass(frozen=True)
class SmoothingSpec:
    bandwidth: float = 0.5
    kernel_order: int = 8

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.kernel_order < 8 or self.kernel_order % 2:
            raise ValueError("kernel_order must be an even integer >= 8")


# ---------------------------------------------------------------------------
# scalar building blocks (all vectorised over numpy arrays)


def check_loss(u, tau):
    """Check function ``rho_tau(u) = u * (tau - 1(u <= 0))``."""
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u <= 0))
    return out if out.ndim else float(out)


def score_psi(u, tau):
    """Quantile score ``tau - 1(u < 0)``; note ``psi(0) = tau``."""
    u = np.asarray(u, dtype=float)
    out = tau - (u < 0).astype(float)
    return out if out.ndim else float(out)


def _even_poly(z, coefs):
    z2 = z * z
    acc = np.zeros_like(z)
    for c in coefs[::-1]:
        acc = acc * z2 + c
    return acc


def kernel_k(z):
    """Order-8 polynomial kernel supported on [-1, 1]."""
    z = np.asarray(z, dtype=float)
    out = np.where(np.abs(z) < 1.0, KERNEL_SCALE * _even_poly(z, KERNEL_POLY), 0.0)
    return out if out.ndim else float(out)


def kernel_k_prime(z):
    z = np.asarray(z, dtype=float)
    out = np.where(np.abs(z) < 1.0, KERNEL_SCALE * z * _even_poly(z, KERNEL_DERIV), 0.0)
    return out if out.ndim else float(out)


def kernel_K(z):
    """Survival-type integrated kernel ``K(z) = 1 - int_{-1}^{z} k``."""
    z = np.asarray(z, dtype=float)
    zc = np.clip(z, -1.0, 1.0)
    out = 0.5 - KERNEL_SCALE * zc * _even_poly(zc, KERNEL_ANTI)
    out = np.where(z <= -1.0, 1.0, np.where(z >= 1.0, 0.0, out))
    return out if out.ndim else float(out)


def smoothed_loss(u, tau, h, deriv=0):
    """Smoothed check loss ``(tau - K(u/h)) u`` or its first/second derivative in u."""
    u = np.asarray(u, dtype=float)
    z = u / h
    if deriv == 0:
        return (tau - kernel_K(z)) * u
    if deriv == 1:
        return tau - kernel_K(z) + z * kernel_k(z)
    if deriv == 2:
        return (2.0 * kernel_k(z) + z * kernel_k_prime(z)) / h
    raise ValueError("deriv must be 0, 1 or 2")


# ---------------------------------------------------------------------------
# batched interior point (Frisch-Newton, Mehrotra predictor-corrector)


def _step_length(v, dv):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return ratio.min(axis=-1)


def _gram(X, q):
    # X: (n,p) shared or (B,n,p); q: (B,n)
    p = X.shape[-1]
    if X.ndim == 2:
        outer = (X[:, :, None] * X[:, None, :]).reshape(X.shape[0], p * p)
        return (q @ outer).reshape(q.shape[0], p, p)
    return np.matmul(np.swapaxes(X, 1, 2) * q[:, None, :], X)


def _Xt(X, v):
    # X' v for each problem; v: (B,n) -> (B,p)
    if X.ndim == 2:
        return v @ X
    return np.einsum("bnp,bn->bp", X, v)


def _Xb(X, b):
    # X b for each problem; b: (B,p) -> (B,n)
    if X.ndim == 2:
        return b @ X.T
    return np.einsum("bnp,bp->bn", X, b)


def _solve(G, rhs):
    return np.linalg.solve(G, rhs[..., None])[..., 0]


def _solve_spd(G, rhs):
    # ridge keeps a batch solvable when a single member is singular
    d = np.einsum("bii->bi", G).max(1)
    G = G + (1e-13 * d + 1e-300)[:, None, None] * np.eye(G.shape[-1])
    return _solve(G, rhs)


def _ipm(X, Y, tau, tol, max_iter):
    """Frisch-Newton interior point for the dual of the quantile LP.

    Solves ``max y'a s.t. X'a = (1-tau) X'1, 0 <= a <= 1`` for every row of
    ``Y`` at once; the regression coefficients are minus the equality
    multipliers. Returns ``(beta, gap, iterations)``.
    """
    B, n = Y.shape
    beta_ = 0.99995
    c = -Y
    ones = np.ones((B, n))
    b = (1.0 - tau) * _Xt(X, ones)

    x = np.full((B, n), 1.0 - tau)
    s = np.full((B, n), tau)
    G0 = _gram(X, ones)
    pi = _solve_spd(G0, _Xt(X, c))
    r = c - _Xb(X, pi)
    r = r + 0.001 * (r == 0)
    z = np.where(r > 0, r, 0.0)
    w = z - r
    gap = (c * x).sum(1) - (b * pi).sum(1) + w.sum(1)
    scale = 1.0 + np.abs(Y).sum(1)
    active = gap > tol * scale
    it = 0
    while active.any() and it < max_iter:
        it += 1
        ia = np.flatnonzero(active)
        Xa = X if X.ndim == 2 else X[ia]
        with np.errstate(all="ignore"):
            out = _ipm_step(Xa, c[ia], b[ia], tau, n, x[ia], s[ia], pi[ia], z[ia], w[ia],
                            gap[ia], active[ia], tol, scale[ia], beta_)
        x[ia], s[ia], pi[ia], z[ia], w[ia], gap[ia], active[ia] = out
    return -pi, gap / scale, it


def _ipm_step(X, c, b, tau, n, x, s, pi, z, w, gap, active, tol, scale, beta_):
    """One Mehrotra predictor-corrector step for every active problem."""
    q = 1.0 / (z / x + w / s)
    r = z - w
    G = _gram(X, q)
    rhs = _Xt(X, q * r)
    dy = _solve_spd(G, rhs)
    dx = q * (_Xb(X, dy) - r)
    ds = -dx
    dz = -z * (dx / x + 1.0)
    dw = -w * (ds / s + 1.0)
    fx = _step_length(x, dx)
    fs = _step_length(s, ds)
    fw = _step_length(w, dw)
    fz = _step_length(z, dz)
    fp = np.minimum(np.minimum(fx, fs) * beta_, 1.0)
    fd = np.minimum(np.minimum(fw, fz) * beta_, 1.0)
    corr = np.minimum(fp, fd) < 1.0
    if corr.any():
        mu = (x * z).sum(1) + (s * w).sum(1)
        g = ((x + fp[:, None] * dx) * (z + fd[:, None] * dz)).sum(1) + (
            (s + fp[:, None] * ds) * (w + fd[:, None] * dw)
        ).sum(1)
        mu = mu * (g / mu) ** 3 / (2.0 * n)
        dxdz = dx * dz
        dsdw = ds * dw
        xinv = 1.0 / x
        sinv = 1.0 / s
        xi = mu[:, None] * (xinv - sinv)
        rhs_c = rhs + _Xt(X, q * (dxdz - dsdw - xi))
        dy_c = _solve_spd(G, rhs_c)
        dx_c = q * (_Xb(X, dy_c) + xi - r - dxdz + dsdw)
        ds_c = -dx_c
        dz_c = mu[:, None] * xinv - z - xinv * z * dx_c - dxdz
        dw_c = mu[:, None] * sinv - w - sinv * w * ds_c - dsdw
        m = corr[:, None]
        dy = np.where(m, dy_c, dy)
        dx = np.where(m, dx_c, dx)
        ds = np.where(m, ds_c, ds)
        dz = np.where(m, dz_c, dz)
        dw = np.where(m, dw_c, dw)
        fx = _step_length(x, dx)
        fs = _step_length(s, ds)
        fw = _step_length(w, dw)
        fz = _step_length(z, dz)
        fp = np.minimum(np.minimum(fx, fs) * beta_, 1.0)
        fd = np.minimum(np.minimum(fw, fz) * beta_, 1.0)
    finite = (
        np.isfinite(fp) & np.isfinite(fd) & np.isfinite(dy).all(1)
        & np.isfinite(dx).all(1) & np.isfinite(dz).all(1) & np.isfinite(dw).all(1)
    )
    active &= finite
    # a stalled iterate (no usable step) is left for the vertex polish
    stalled = np.maximum(fp, fd) < 1e-12
    fp = np.where(active, fp, 0.0)[:, None]
    fd = np.where(active, fd, 0.0)
    step = active[:, None]
    x = np.where(step, x + fp * dx, x)
    s = np.where(step, s + fp * ds, s)
    pi = np.where(step, pi + fd[:, None] * dy, pi)
    fd = fd[:, None]
    w = np.where(step, w + fd * dw, w)
    z = np.where(step, z + fd * dz, z)
    gap = (c * x).sum(1) - (b * pi).sum(1) + w.sum(1)
    active &= (gap > tol * scale) & ~stalled
    return x, s, pi, z, w, gap, active


def _objective(X, Y, beta, tau):
    return check_loss(Y - _Xb(X, beta), tau).sum(-1)


def _gather(X, idx):
    if X.ndim == 2:
        return X[idx]
    return np.take_along_axis(X, idx[:, :, None], axis=1)


def _vertex(X, Y, tau, basis):
    """Interpolate the ``basis`` observations and test KKT optimality.

    At a vertex the non-basic observations carry subgradient
    ``psi_tau(r_t)``; the basic ones must absorb the remainder with
    multipliers inside ``[tau - 1, tau]``. Returns ``(beta, optimal)``.
    """
    B, n = Y.shape
    Xh = _gather(X, basis)
    yh = np.take_along_axis(Y, basis, axis=1)
    scale = np.abs(Xh).max(axis=1) + 1e-300
    ok = np.abs(np.linalg.det(Xh / scale[:, None, :])) > 1e-10
    beta = np.zeros((B, X.shape[-1]))
    optimal = np.zeros(B, dtype=bool)
    if not ok.any():
        return beta, optimal
    ia = np.flatnonzero(ok)
    Xa = X if X.ndim == 2 else X[ia]
    beta[ia] = _solve(Xh[ia], yh[ia])
    r = Y[ia] - _Xb(Xa, beta[ia])
    psi = tau - (r < 0).astype(float)
    np.put_along_axis(psi, basis[ia], 0.0, axis=1)
    g = _Xt(Xa, psi)
    a = _solve(np.swapaxes(Xh[ia], 1, 2), -g)
    eps = 1e-9
    optimal[ia] = np.all((a >= tau - 1.0 - eps) & (a <= tau + eps), axis=1)
    return beta, optimal


def _polish(X, Y, beta, tau):
    """Move interior-point solutions onto a certified vertex.

    The first ``p`` linearly independent observations in order of absolute
    residual seed a simplex run that ends at a KKT-certified vertex. Where
    that fails, the plain interpolating vertex is kept if it does not raise
    the objective, and the interior-point solution otherwise. Returns
    ``(beta, basis)`` with basis rows of -1 where no certified vertex was
    reached.
    """
    resid = Y - _Xb(X, beta)
    order = np.argsort(np.abs(resid), axis=1, kind="stable")
    seed = independent_rows(X, order)
    out = beta.copy()
    basis = np.full(seed.shape, -1, dtype=np.int64)
    good = np.flatnonzero(seed[:, 0] >= 0)
    if good.size == 0:
        return out, basis
    Xg = X if X.ndim == 2 else X[good]
    idx = seed[good].copy()
    vert, st = pivot(Xg, Y[good], tau, idx, 25 * beta.shape[1])
    opt = st == 0
    out[good[opt]] = vert[opt]
    basis[good[opt]] = idx[opt]
    if not opt.all():
        bad = good[~opt]
        Xb_ = X if X.ndim == 2 else X[bad]
        v2, _ = _vertex(Xb_, Y[bad], tau, seed[bad])
        f_ipm = _objective(Xb_, Y[bad], beta[bad], tau)
        f_v = _objective(Xb_, Y[bad], v2, tau)
        keep = f_v <= f_ipm + 1e-12 * (1.0 + np.abs(f_ipm))
        out[bad] = np.where(keep[:, None], v2, beta[bad])
    return out, basis


def _solve_single_column(x, Y, tau):
    """Exact minimiser for a one-column design, lower endpoint on ties.

    ``rho_tau(y - x b) = |x| rho_{tau'}(y/x - b)`` with ``tau' = tau`` for
    ``x > 0`` and ``1 - tau`` for ``x < 0``, so the problem is a weighted
    quantile of the breakpoints ``y/x``. The right derivative at a
    breakpoint is nondecreasing; the first breakpoint where it is
    nonnegative is the infimum of the minimiser set.
    """
    # x: (n,) shared or (B,n); Y: (B,n)
    x = np.broadcast_to(x, Y.shape)
    nz = x != 0
    ax = np.where(nz, np.abs(x), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        bp = np.where(nz, Y / np.where(nz, x, 1.0), np.inf)
    t_eff = np.where(x > 0, tau, 1.0 - tau)
    order = np.argsort(bp, axis=1, kind="stable")
    bp_s = np.take_along_axis(bp, order, axis=1)
    a_s = np.take_along_axis(ax, order, axis=1)
    t_s = np.take_along_axis(t_eff, order, axis=1)
    below = np.cumsum(a_s * (1.0 - t_s), axis=1)
    above = (a_s * t_s).sum(1, keepdims=True) - np.cumsum(a_s * t_s, axis=1)
    right = below - above
    tol = 1e-12 * (a_s.sum(1, keepdims=True) + 1.0)
    hit = (right >= -tol) & np.isfinite(bp_s)
    k = np.argmax(hit, axis=1)
    return bp_s[np.arange(Y.shape[0]), k][:, None]


def solve_qr_batch(X, Y, tau, tol=1e-10, max_iter=MAX_ITER, polish=True, basis0=None,
                   max_pivots=None, return_info=False):
    """Solve many quantile regressions of equal size in one pass.

    Parameters
    ----------
    X : ndarray, shape (n, p) or (B, n, p)
        Shared design, or one design per problem.
    Y : ndarray, shape (B, n)
        Responses.
    tau : float
    tol : float
        Relative duality-gap tolerance of the interior-point iteration.
    basis0 : int ndarray, shape (B, p), optional
        Candidate optimal bases (e.g. from a previous, nearby problem).
        Problems whose candidate passes the KKT check skip the interior
        point entirely. Rows containing -1 are ignored.

    Returns
    -------
    beta : ndarray, shape (B, p)
    info : dict, only when ``return_info`` -- ``gap``, ``iterations`` and
        ``basis`` (rows of -1 where no vertex was identified).
    """
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    B = Y.shape[0]
    p = X.shape[-1]
    if max_pivots is None:
        max_pivots = 25 * p
    gap = np.zeros(B)
    it = 0
    if p == 1:
        beta = _solve_single_column(X[..., 0], Y, tau)
        basis = np.full((B, 1), -1)
    else:
        beta = np.zeros((B, p))
        basis = np.full((B, p), -1)
        todo = np.ones(B, dtype=bool)
        if basis0 is not None:
            basis0 = np.asarray(basis0)
            cand = np.all(basis0 >= 0, axis=1)
            if cand.any():
                ic = np.flatnonzero(cand)
                bas = basis0[ic].astype(np.int64)
                bv, st = pivot(X if X.ndim == 2 else X[ic], Y[ic], tau, bas, max_pivots)
                opt = st == 0
                hit = ic[opt]
                beta[hit] = bv[opt]
                basis[hit] = bas[opt]
                todo[hit] = False
        if todo.any():
            it_ = np.flatnonzero(todo)
            Xt = X if X.ndim == 2 else X[it_]
            b_ipm, g_ipm, it = _ipm(Xt, Y[it_], tau, tol, max_iter)
            if polish:
                b_ipm, bas = _polish(Xt, Y[it_], b_ipm, tau)
                basis[it_] = bas
            beta[it_] = b_ipm
            gap[it_] = g_ipm
    if return_info:
        return beta, {"gap": gap, "iterations": it, "basis": basis}
    return beta


def _check_rank(X, tol=1e-8):
    """Raise ``RankDeficientError`` naming the first dependent column."""
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms == 0):
        j = int(np.flatnonzero(norms == 0)[0])
        raise RankDeficientError(f"design column {j} is identically zero", column=j)
    Xs = X / norms
    sv = np.linalg.svd(Xs, compute_uv=False)
    if sv[-1] >= tol * sv[0]:
        return
    for j in range(1, X.shape[1] + 1):
        s = np.linalg.svd(Xs[:, :j], compute_uv=False)
        if s[-1] < tol * s[0]:
            raise RankDeficientError(
                f"design is rank deficient: column {j - 1} is spanned by earlier columns",
                column=j - 1,
            )


def stationarity_gap(X, y, beta, tau, zero_tol=1e-9):
    """Subgradient optimality gap of a quantile-regression solution.

    For observations with nonzero residual the subgradient is fixed at
    ``psi_tau(r)``; interpolated observations may take any value in
    ``[tau - 1, tau]``. Returns, per column, the smallest achievable
    ``|sum_t x_tj g_t|`` divided by ``sum_t |x_tj|``.
    """
    from scipy.optimize import lsq_linear

    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    r = y - X @ beta
    scale = np.abs(y).max() + np.abs(X).max() * np.abs(beta).sum() + 1.0
    zero = np.abs(r) <= zero_tol * scale
    g = X[~zero].T @ score_psi(r[~zero], tau)
    denom = np.abs(X).sum(0)
    if zero.any():
        res = lsq_linear(X[zero].T, -g, bounds=(tau - 1.0, tau), method="bvls", tol=1e-14)
        g = g + X[zero].T @ res.x
    return np.abs(g) / denom


def fit_qr(problem, tol=1e-10, max_iter=MAX_ITER):
    """Minimise ``sum_t w_t rho_tau(y_t - x_t' beta)``.

    Interior point with vertex polishing; one-column designs are solved
    exactly and return the lower endpoint when the minimiser is an
    interval.
    """
    X, y = problem.weighted()
    _check_rank(X if problem.weights is None else X[problem.weights > 0])
    beta, info = solve_qr_batch(X, y[None, :], problem.tau, tol=tol, max_iter=max_iter,
                                return_info=True)
    if info["gap"][0] > tol:
        cert = stationarity_gap(X, y, beta[0], problem.tau).max()
        if cert > TOL_STAT:
            raise ConvergenceError(
                f"interior point stopped with relative gap {info['gap'][0]:.3e}",
                gap=float(info["gap"][0]),
            )
    return beta[0]


# ---------------------------------------------------------------------------
# smoothed quantile regression (damped Newton)


def solve_sqr_batch(X, Y, tau, h, beta0=None, tol=TOL_GRAD, max_iter=MAX_ITER):
    """Minimise the smoothed check loss for many problems at once.

    The mean loss ``(1/n) sum_t (tau - K(u_t/h)) u_t`` is minimised by
    Newton steps with Armijo backtracking. Where the Hessian is not positive
    definite it is shifted by a multiple of the identity until it is, which
    blends the step toward steepest descent.

    Returns ``(beta, converged, grad_norm)``.
    """
    X = np.ascontiguousarray(X, dtype=float)
    Y = np.ascontiguousarray(np.atleast_2d(np.asarray(Y, dtype=float)))
    B = Y.shape[0]
    p = X.shape[-1]
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    if beta0 is None:
        beta = solve_qr_batch(X, Y, tau)
    else:
        beta = np.array(beta0, dtype=float, copy=True).reshape(B, p)
    beta = np.ascontiguousarray(beta)
    run = newton_batch_shared if X.ndim == 2 else newton_batch
    gnorm = run(X, Y, float(tau), float(h), beta, float(tol), int(max_iter))
    return beta, gnorm <= 1e3 * tol, gnorm


def fit_sqr(problem, smoothing, beta0=None, tol=TOL_GRAD, max_iter=MAX_ITER):
    """Stationary point of the kernel-smoothed quantile loss, started from the QR fit."""
    if not isinstance(smoothing, SmoothingSpec):
        smoothing = SmoothingSpec(bandwidth=float(smoothing))
    X, y = problem.weighted()
    _check_rank(X)
    beta, ok, gnorm = solve_sqr_batch(
        X, y[None, :], problem.tau, smoothing.bandwidth, beta0=beta0, tol=tol, max_iter=max_iter
    )
    if gnorm[0] > tol:
        raise ConvergenceError(
            f"smoothed Newton stopped with gradient norm {gnorm[0]:.3e}", gap=float(gnorm[0])
        )
    return beta[0]
