"""Quantile factor model estimation on a block of control series.

Factors and loadings are estimated by alternating quantile regressions
(IQR) or alternating smoothed quantile regressions (ISQR); the number of
factors by rank minimisation on a deliberately over-sized fit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .qr import SmoothingSpec, check_loss, smoothed_loss, solve_qr_batch, solve_sqr_batch
from ._validation import check_matrix, check_tau

__all__ = [
    "DegenerateFactorError",
    "FactorFitError",
    "QfmFit",
    "QuantileFactorModel",
    "RankSelection",
    "fit_iqr",
    "fit_isqr",
    "normalize",
    "select_rank",
]

logger = logging.getLogger(__name__)


class DegenerateFactorError(np.linalg.LinAlgError):
    pass


class FactorFitError(RuntimeError):
    """Every restart failed; ``trajectories`` holds the objective paths."""

    def __init__(self, message, trajectories=None):
        super().__init__(message)
        self.trajectories = trajectories or []


@dataclass
class QfmFit:
    factors: np.ndarray
    loadings: np.ndarray
    tau: float
    r: int
    objective: float
    iterations: int
    converged: bool
    smoothed: bool = False
    trace: list = field(default_factory=list)

    @property
    def common(self):
        """Common component ``Lambda F'`` (N x T)."""
        return self.loadings @ self.factors.T

    def write_trace(self, path):
        """Per-iteration objective as CSV (``iteration,objective``)."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration,objective\n")
            for i, v in enumerate(self.trace):
                fh.write(f"{i},{v!r}\n")


@dataclass
class RankSelection:
    r_hat: int
    k: int
    sigma_diag: np.ndarray
    threshold: float
    fit: QfmFit | None = None


def _sign_fix(F, L):
    for j in range(L.shape[1]):
        col = L[:, j]
        tot = col.sum()
        if tot == 0:
            nz = np.flatnonzero(col)
            flip = nz.size > 0 and col[nz[0]] < 0
        else:
            flip = tot < 0
        if flip:
            F[:, j] = -F[:, j]
            L[:, j] = -L[:, j]
    return F, L


def normalize(F_raw, Lambda_raw):
    """Rotate ``(F, Lambda)`` so that ``F'F/T = I`` and ``Lambda'Lambda/N`` is
    diagonal with non-increasing entries, keeping ``F Lambda'`` fixed.

    Each factor column is signed so that its loading column sums to a
    positive number.
    """
    F_raw = np.asarray(F_raw, dtype=float)
    L_raw = np.asarray(Lambda_raw, dtype=float)
    T, r = F_raw.shape
    N = L_raw.shape[0]
    M = F_raw.T @ F_raw / T
    evals, evecs = np.linalg.eigh(M)
    if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
        raise DegenerateFactorError("degenerate factor draw: F'F/T is singular")
    root = (evecs * np.sqrt(evals)) @ evecs.T
    iroot = (evecs / np.sqrt(evals)) @ evecs.T
    F1 = F_raw @ iroot
    L1 = L_raw @ root
    S = L1.T @ L1 / N
    d, V = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(-d, kind="stable")
    V = V[:, order]
    F = F1 @ V
    L = L1 @ V
    return _sign_fix(F, L)


def _complete(F, L, rng):
    """Replace collapsed factor directions by random orthonormal ones.

    With ``F = U S V'`` the pair ``(sqrt(T) U, L V S / sqrt(T))`` has the same
    product; columns of ``U`` with negligible singular values are swapped
    for a random orthonormal complement, whose loadings are then zero.
    """
    T, r = F.shape
    U, S, Vt = np.linalg.svd(F, full_matrices=False)
    weak = S <= 1e-6 * S[0]
    if weak.any():
        G = rng.standard_normal((T, int(weak.sum())))
        G -= U[:, ~weak] @ (U[:, ~weak].T @ G)
        U[:, weak] = np.linalg.qr(G)[0]
    return U * np.sqrt(T), L @ Vt.T * S / np.sqrt(T)


def _orthonormal_start(rng, T, r):
    G = rng.standard_normal((T, r))
    Q, _ = np.linalg.qr(G)
    return Q * np.sqrt(T)


@dataclass
class _Opts:
    restarts: int = 3
    max_iter: int = 100
    tol_obj: float = 1e-6
    seed: int | None = 0


def _opts(opts):
    if opts is None:
        return _Opts()
    if isinstance(opts, _Opts):
        return opts
    return _Opts(**opts)


def _alternate(Y, tau, r, rng, max_iter, tol_obj, h=None):
    """One restart of the alternating scheme. ``Y`` is N x T."""
    N, T = Y.shape
    smoothed = h is not None

    def obj(L, F):
        U = Y - L @ F.T
        if smoothed:
            return float(smoothed_loss(U, tau, h).mean())
        return float(check_loss(U, tau).mean())

    F = _orthonormal_start(rng, T, r)
    L = None
    # interpolation bases are invariant to the normalising rotation, so the
    # previous iteration's bases are reused as warm starts
    basis_L = basis_F = None
    trace = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if smoothed:
            L = solve_sqr_batch(F, Y, tau, h, beta0=L)[0]
            F = solve_sqr_batch(L, Y.T, tau, h, beta0=F)[0]
        else:
            L, info = solve_qr_batch(F, Y, tau, basis0=basis_L, return_info=True)
            basis_L = info["basis"]
            F, info = solve_qr_batch(L, Y.T, tau, basis0=basis_F, return_info=True)
            basis_F = info["basis"]
        try:
            F, L = normalize(F, L)
        except DegenerateFactorError:
            # an exact fit with fewer than r factors leaves F rank deficient
            F, L = normalize(*_complete(F, L, rng))
        trace.append(obj(L, F))
        if len(trace) > 1 and abs(trace[-2] - trace[-1]) <= tol_obj * abs(trace[-2]):
            converged = True
            break
    return F, L, trace, converged, it


def _fit(controls, tau, r, opts, h=None):
    Y = check_matrix(controls, "controls")
    tau = check_tau(tau)
    N, T = Y.shape
    r = int(r)
    if r < 1:
        raise ValueError("rank r must be at least 1")
    if r >= min(N, T):
        raise ValueError(f"rank r={r} must be smaller than min(N, T)={min(N, T)}")
    o = _opts(opts)
    rng = np.random.default_rng(o.seed)
    best = None
    trajectories = []
    for _ in range(max(1, o.restarts)):
        try:
            F, L, trace, conv, it = _alternate(Y, tau, r, rng, o.max_iter, o.tol_obj, h)
        except np.linalg.LinAlgError as exc:
            logger.debug("restart failed: %s", exc)
            trajectories.append([])
            continue
        trajectories.append(trace)
        if best is None or trace[-1] < best[2][-1]:
            best = (F, L, trace, conv, it)
    if best is None:
        raise FactorFitError("all restarts failed", trajectories)
    F, L, trace, conv, it = best
    return QfmFit(
        factors=F,
        loadings=L,
        tau=tau,
        r=r,
        objective=trace[-1],
        iterations=it,
        converged=conv,
        smoothed=h is not None,
        trace=trace,
    )


def fit_iqr(controls, tau, r, opts=None):
    """Iterative quantile regression on an N x T control block.

    ``opts`` may carry ``restarts``, ``max_iter``, ``tol_obj`` and ``seed``.
    The best restart (lowest final objective) is returned, normalised.
    """
    return _fit(controls, tau, r, opts)


def fit_isqr(controls, tau, r, smoothing=None, opts=None):
    """Iterative smoothed quantile regression; see :func:`fit_iqr`."""
    if smoothing is None:
        smoothing = SmoothingSpec()
    elif not isinstance(smoothing, SmoothingSpec):
        smoothing = SmoothingSpec(bandwidth=float(smoothing))
    return _fit(controls, tau, r, opts, h=smoothing.bandwidth)


def select_rank(controls, tau, k=8, opts=None):
    """Rank minimisation: count loading variances of a rank-``k`` IQR fit
    that exceed ``sigma_1 * min(sqrt N, sqrt T)^(-2/3)``.
    """
    Y = check_matrix(controls, "controls")
    N, T = Y.shape
    if k < 1 or k >= min(N, T):
        raise ValueError(f"probe rank k={k} must satisfy 1 <= k < min(N, T)")
    fit = fit_iqr(Y, tau, k, opts)
    sigma = np.diag(fit.loadings.T @ fit.loadings) / N
    L_nt = min(np.sqrt(N), np.sqrt(T))
    threshold = sigma[0] * L_nt ** (-2.0 / 3.0)
    r_hat = int(np.sum(sigma >= threshold))
    return RankSelection(r_hat=r_hat, k=k, sigma_diag=sigma, threshold=float(threshold), fit=fit)


class QuantileFactorModel(TransformerMixin, BaseEstimator):
    """Quantile factor model as a scikit-learn transformer.

    ``X`` is laid out as (n_periods, n_series): rows are time periods, the
    columns are control units (and any covariate series).

    Parameters
    ----------
    tau : float, default=0.5
    n_factors : int or "auto", default="auto"
        ``"auto"`` selects the rank by rank minimisation with probe rank
        ``k_max``.
    method : {"iqr", "isqr"}, default="iqr"
    bandwidth : float, default=0.5
        Smoothing bandwidth, used by ``"isqr"`` only.
    k_max : int, default=8
    restarts, max_iter, tol, random_state
        Passed to the alternating solver.

    Attributes
    ----------
    factors_ : ndarray (n_periods, r)
    loadings_ : ndarray (n_series, r)
    n_factors_ : int
    rank_selection_ : RankSelection or None
    fit_ : QfmFit
    """

    def __init__(self, tau=0.5, n_factors="auto", method="iqr", bandwidth=0.5, k_max=8,
                 restarts=3, max_iter=100, tol=1e-6, random_state=0):
        self.tau = tau
        self.n_factors = n_factors
        self.method = method
        self.bandwidth = bandwidth
        self.k_max = k_max
        self.restarts = restarts
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _opts(self):
        return _Opts(restarts=self.restarts, max_iter=self.max_iter, tol_obj=self.tol,
                     seed=self.random_state)

    def fit(self, X, y=None):
        Y = check_matrix(X, "X").T
        if self.method not in ("iqr", "isqr"):
            raise ValueError(f"method must be 'iqr' or 'isqr', got {self.method!r}")
        opts = self._opts()
        if self.n_factors == "auto":
            self.rank_selection_ = select_rank(Y, self.tau, self.k_max, opts)
            r = max(1, self.rank_selection_.r_hat)
        else:
            self.rank_selection_ = None
            r = int(self.n_factors)
        if self.method == "iqr":
            fit = fit_iqr(Y, self.tau, r, opts)
        else:
            fit = fit_isqr(Y, self.tau, r, SmoothingSpec(self.bandwidth), opts)
        self.fit_ = fit
        self.factors_ = fit.factors
        self.loadings_ = fit.loadings
        self.n_factors_ = r
        self.n_features_in_ = Y.shape[0]
        return self

    def transform(self, X):
        """Factor values for the rows of ``X`` given the fitted loadings.

        Each row is a cross-section regressed on the loadings at quantile
        ``tau``; on the training data this reproduces ``factors_`` up to
        solver tolerance.
        """
        check_is_fitted(self, "loadings_")
        Z = check_matrix(X, "X")
        if Z.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {Z.shape[1]} columns, expected {self.n_features_in_}")
        if self.method == "isqr":
            return solve_sqr_batch(self.loadings_, Z, self.tau, self.bandwidth)[0]
        return solve_qr_batch(self.loadings_, Z, self.tau)

    def fit_transform(self, X, y=None):
        return self.fit(X).factors_
