"""Compiled damped Newton for the kernel-smoothed quantile loss.

One problem at a time: Newton direction from the analytic Hessian, shifted
toward the identity when it is not positive definite, followed by Armijo
backtracking. The kernel polynomials are duplicated here as scalar loops.
"""

import numpy as np
from numba import njit

_SCALE = 3465.0 / 8192.0
_POLY = np.array([7.0, -105.0, 462.0, -858.0, 715.0, -221.0])
_ANTI = np.array([7.0, -35.0, 462.0 / 5.0, -858.0 / 7.0, 715.0 / 9.0, -221.0 / 11.0])
_DERIV = np.array([-210.0, 1848.0, -5148.0, 5720.0, -2210.0])


@njit(cache=True)
def _horner(z2, coefs):
    acc = 0.0
    for i in range(coefs.shape[0] - 1, -1, -1):
        acc = acc * z2 + coefs[i]
    return acc


@njit(cache=True)
def _loss_terms(u, tau, h):
    """Loss, first and second derivative in ``u`` of ``(tau - K(u/h)) u``."""
    z = u / h
    if z <= -1.0:
        return (tau - 1.0) * u, tau - 1.0, 0.0
    if z >= 1.0:
        return tau * u, tau, 0.0
    z2 = z * z
    K = 0.5 - _SCALE * z * _horner(z2, _ANTI)
    k = _SCALE * _horner(z2, _POLY)
    kp = _SCALE * z * _horner(z2, _DERIV)
    return (tau - K) * u, tau - K + z * k, (2.0 * k + z * kp) / h


@njit(cache=True)
def _objective(X, y, beta, tau, h):
    n, p = X.shape
    f = 0.0
    for t in range(n):
        u = y[t]
        for k in range(p):
            u -= X[t, k] * beta[k]
        f += _loss_terms(u, tau, h)[0]
    return f / n


@njit(cache=True)
def _newton_one(X, y, tau, h, beta, tol, max_iter):
    n, p = X.shape
    grad = np.empty(p)
    H = np.empty((p, p))
    eye = np.eye(p)
    gnorm = np.inf
    for _ in range(max_iter + 1):
        grad[:] = 0.0
        H[:, :] = 0.0
        f0 = 0.0
        for t in range(n):
            u = y[t]
            for k in range(p):
                u -= X[t, k] * beta[k]
            l0, l1, l2 = _loss_terms(u, tau, h)
            f0 += l0
            for k in range(p):
                grad[k] -= X[t, k] * l1
                if l2 != 0.0:
                    for q in range(k + 1):
                        H[k, q] += X[t, k] * X[t, q] * l2
        f0 /= n
        gnorm = 0.0
        for k in range(p):
            grad[k] /= n
            gnorm = max(gnorm, abs(grad[k]))
        if gnorm <= tol:
            break
        hmax = 1e-12
        for k in range(p):
            for q in range(k + 1):
                H[k, q] /= n
                H[q, k] = H[k, q]
                hmax = max(hmax, abs(H[k, q]))
        lam_min = np.linalg.eigvalsh(H)[0]
        if lam_min <= 1e-10 * hmax:
            H += (1e-6 * hmax - lam_min) * eye
        step = -np.linalg.solve(H, grad)
        slope = 0.0
        for k in range(p):
            slope += grad[k] * step[k]
        t_ = 1.0
        moved = False
        for _ls in range(40):
            cand = beta + t_ * step
            fc = _objective(X, y, cand, tau, h)
            if fc <= f0 + 1e-4 * t_ * slope:
                beta[:] = cand
                moved = True
                break
            t_ *= 0.5
        if not moved or abs(fc - f0) <= 1e-15 * (1.0 + abs(f0)):
            # no further decrease is representable; report the gradient here
            if moved:
                continue
            break
    return gnorm


@njit(cache=True)
def newton_batch_shared(X, Y, tau, h, beta, tol, max_iter):
    B = Y.shape[0]
    gnorm = np.empty(B)
    for b in range(B):
        gnorm[b] = _newton_one(X, Y[b], tau, h, beta[b], tol, max_iter)
    return gnorm


@njit(cache=True)
def newton_batch(X, Y, tau, h, beta, tol, max_iter):
    B = Y.shape[0]
    gnorm = np.empty(B)
    for b in range(B):
        gnorm[b] = _newton_one(X[b], Y[b], tau, h, beta[b], tol, max_iter)
    return gnorm
