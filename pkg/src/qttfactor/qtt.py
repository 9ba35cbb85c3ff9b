"""Second stage: quantile regression of a treated unit on estimated factors.

The treated outcome is regressed at quantile ``tau`` on the factors and
the treatment indicator; the indicator's coefficient is the quantile
treatment effect on the treated. Time-varying effects, factor-interacted
effects and several treated units reuse the same fit with a different
design.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_tau, check_treatment, check_vector
from .qfm import QuantileFactorModel, fit_iqr, fit_isqr, select_rank
from .qr import QrProblem, RankDeficientError, SmoothingSpec, fit_qr

__all__ = [
    "CollinearityError",
    "FactorInteractedQtt",
    "QttEstimate",
    "QttEstimator",
    "TimeVaryingQtt",
    "UnitFailure",
    "G_FORMS",
    "estimate_qtt",
    "estimate_qtt_factor_interacted",
    "estimate_qtt_multi",
    "estimate_qtt_time_varying",
    "fit_first_stage",
    "predict_quantile_path",
]

logger = logging.getLogger(__name__)

COLLINEAR_TOL = 1e-8


class CollinearityError(ValueError):
    pass


@dataclass
class QttEstimate:
    """QTT at one quantile level.

    ``lambda1`` is the treated unit's loading on the factors used in the
    second stage; ``stage1`` names the factor estimator.
    """

    delta: float
    lambda1: np.ndarray
    tau: float
    r: int
    stage1: str = "IQR"
    estimator: str = "NQTT"

    def to_dict(self):
        return {
            "tau": float(self.tau),
            "delta": float(self.delta),
            "lambda1": [float(v) for v in np.ravel(self.lambda1)],
            "r": int(self.r),
            "stage1": self.stage1,
            "estimator": self.estimator,
        }

    def to_json(self):
        return json.dumps(self.to_dict())


@dataclass
class UnitFailure:
    """Placeholder for a treated unit whose second stage failed."""

    unit: int
    error: str

    def to_dict(self):
        return asdict(self)


def _standardized_min_sv(D):
    norms = np.linalg.norm(D, axis=0)
    if np.any(norms == 0):
        return 0.0
    return float(np.linalg.svd(D / norms, compute_uv=False)[-1])


def _check_design(F, extra, message):
    D = np.column_stack([F, extra])
    if _standardized_min_sv(D) < COLLINEAR_TOL:
        raise CollinearityError(message)
    return D


def _qr_fit(D, y, tau):
    try:
        return fit_qr(QrProblem(D, y, tau))
    except RankDeficientError as exc:
        raise CollinearityError(str(exc)) from exc


def _inputs(y1, d1, F_hat):
    F = check_matrix(F_hat, "F_hat")
    if F.ndim == 1:
        F = F[:, None]
    T = F.shape[0]
    y = check_vector(y1, "y1", T)
    d = check_treatment(d1, T)
    return y, d, F


def estimate_qtt(y1, d1, F_hat, tau, stage1="IQR", estimator="NQTT"):
    """Quantile treatment effect from the regression of ``y1`` on ``[F_hat | d1]``.

    Parameters
    ----------
    y1 : array, shape (T,)
        Treated outcome.
    d1 : array, shape (T,)
        Binary, non-decreasing treatment indicator.
    F_hat : array, shape (T, r)
        Factors estimated at the same ``tau``.
    tau : float

    Returns
    -------
    QttEstimate
    """
    tau = check_tau(tau)
    y, d, F = _inputs(y1, d1, F_hat)
    D = _check_design(F, d, "treatment indicator spanned by factors")
    beta = _qr_fit(D, y, tau)
    r = F.shape[1]
    return QttEstimate(float(beta[r]), beta[:r].copy(), tau, r, stage1, estimator)


def predict_quantile_path(lambda1, F_hat):
    """Fitted counterfactual quantile path ``F_hat @ lambda1``."""
    F = np.asarray(F_hat, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    lam = np.ravel(np.asarray(lambda1, dtype=float))
    if lam.shape[0] != F.shape[1]:
        raise ValueError(f"lambda1 has length {lam.shape[0]}, F_hat has {F.shape[1]} columns")
    return F @ lam


# ---------------------------------------------------------------------------
# time-varying effects


def _basis(form, s):
    if form == "constant":
        return np.ones((s.size, 1))
    if form == "decay":
        return np.column_stack([np.ones_like(s), 1.0 / s])
    if form == "linear":
        return np.column_stack([np.ones_like(s), s])
    if form == "quadratic":
        return np.column_stack([np.ones_like(s), s, s * s])
    raise ValueError(f"unknown g_form {form!r}; choose from {sorted(G_FORMS)}")


G_FORMS = {"constant": 1, "decay": 2, "linear": 2, "quadratic": 3}


@dataclass
class TimeVaryingQtt:
    """Effect path ``g(t; zeta)`` over post-treatment periods.

    ``g`` is a linear combination of basis functions of ``s = t - T0``:
    ``constant`` (1), ``decay`` (1, 1/s), ``linear`` (1, s) or
    ``quadratic`` (1, s, s^2).
    """

    zeta: np.ndarray
    g_form: str
    lambda1: np.ndarray
    tau: float
    T0: int

    def __post_init__(self):
        if len(np.ravel(self.zeta)) != G_FORMS[self.g_form]:
            raise ValueError(f"{self.g_form} family takes {G_FORMS[self.g_form]} parameters")

    def effect(self, t):
        """``g(t; zeta)`` at 1-based periods ``t > T0``."""
        s = np.asarray(t, dtype=float) - self.T0
        return _basis(self.g_form, np.atleast_1d(s)) @ self.zeta

    def to_dict(self):
        return {
            "tau": float(self.tau),
            "g_form": self.g_form,
            "zeta": [float(v) for v in self.zeta],
            "lambda1": [float(v) for v in self.lambda1],
            "T0": int(self.T0),
        }


def estimate_qtt_time_varying(y1, d1, F_hat, tau, g_form="constant"):
    """Effect path from the regression on ``[F_hat | b_j(t) d1]``.

    The polynomial families change the convergence rate of their
    coefficients; bootstrap intervals for them are not covered by the
    constant-effect theory.
    """
    tau = check_tau(tau)
    y, d, F = _inputs(y1, d1, F_hat)
    if g_form not in G_FORMS:
        raise ValueError(f"unknown g_form {g_form!r}; choose from {sorted(G_FORMS)}")
    if g_form in ("linear", "quadratic"):
        warnings.warn(
            f"{g_form} effect paths have non-standard asymptotics; treat intervals as heuristic",
            stacklevel=2,
        )
    T = y.size
    T0 = int(np.argmax(d))
    s = np.arange(1, T + 1, dtype=float) - T0
    s_post = np.where(d > 0, s, 1.0)
    cols = _basis(g_form, s_post) * d[:, None]
    D = _check_design(F, cols, "effect basis columns are collinear with the factors")
    beta = _qr_fit(D, y, tau)
    r = F.shape[1]
    return TimeVaryingQtt(beta[r:].copy(), g_form, beta[:r].copy(), tau, T0)


# ---------------------------------------------------------------------------
# factor-interacted effects


@dataclass
class FactorInteractedQtt:
    """Effect ``delta_t = zeta0 + zeta1' f_t`` in post-treatment periods."""

    zeta0: float
    zeta1: np.ndarray
    lambda1: np.ndarray
    tau: float
    inference: str = "heuristic"

    def effect(self, F_post):
        return self.zeta0 + np.asarray(F_post, dtype=float) @ self.zeta1

    def to_dict(self):
        return {
            "tau": float(self.tau),
            "zeta0": float(self.zeta0),
            "zeta1": [float(v) for v in self.zeta1],
            "lambda1": [float(v) for v in self.lambda1],
            "inference": self.inference,
        }


def estimate_qtt_factor_interacted(y1, d1, F_hat, tau):
    """Fit ``y1 ~ [F_hat | F_hat * d1 | d1]`` at quantile ``tau``."""
    tau = check_tau(tau)
    y, d, F = _inputs(y1, d1, F_hat)
    r = F.shape[1]
    T1 = int(d.sum())
    if T1 < r + 1:
        raise ValueError(f"post-treatment period has {T1} observations; need at least r + 1 = {r + 1}")
    D = _check_design(F, np.column_stack([F * d[:, None], d]), "interaction design is collinear")
    beta = _qr_fit(D, y, tau)
    return FactorInteractedQtt(float(beta[2 * r]), beta[r:2 * r].copy(), beta[:r].copy(), tau)


# ---------------------------------------------------------------------------
# several treated units


def estimate_qtt_multi(treated, d, F_hat, tau, stage1="IQR"):
    """One second stage per treated row, sharing ``F_hat``.

    ``d`` is either one indicator for all units or an ``(m, T)`` block.
    Units whose fit fails yield a :class:`UnitFailure` (1-based ``unit``)
    and do not stop the others.
    """
    Yt = check_matrix(np.atleast_2d(treated), "treated")
    m, T = Yt.shape
    D = np.asarray(d, dtype=float)
    if D.ndim == 1:
        D = np.broadcast_to(D, (m, T))
    if D.shape != (m, T):
        raise ValueError(f"treatment block has shape {D.shape}, expected {(m, T)}")
    out = []
    for i in range(m):
        try:
            out.append(estimate_qtt(Yt[i], D[i], F_hat, tau, stage1))
        except (ValueError, RuntimeError) as exc:
            logger.warning("treated unit %d failed: %s", i + 1, exc)
            out.append(UnitFailure(i + 1, str(exc)))
    return out


# ---------------------------------------------------------------------------
# first stage plus second stage


def fit_first_stage(controls, tau, stage1="iqr", n_factors=None, k_max=8, bandwidth=0.5, opts=None):
    """Factor fit at ``tau`` on an N x T control block.

    The rank is chosen by rank minimisation (always on the nonsmoothed
    fit) unless ``n_factors`` is given. Returns ``(QfmFit, RankSelection or None)``.
    """
    stage1 = stage1.lower()
    if stage1 not in ("iqr", "isqr"):
        raise ValueError(f"stage1 must be 'iqr' or 'isqr', got {stage1!r}")
    sel = None
    if n_factors is None:
        sel = select_rank(controls, tau, k_max, opts)
        r = max(1, sel.r_hat)
    else:
        r = int(n_factors)
    if stage1 == "iqr":
        if sel is not None and r == sel.k:
            return sel.fit, sel
        return fit_iqr(controls, tau, r, opts), sel
    return fit_isqr(controls, tau, r, SmoothingSpec(bandwidth), opts), sel


class QttEstimator(BaseEstimator):
    """Quantile treatment effect on the treated as a scikit-learn estimator.

    Parameters
    ----------
    tau : float, default=0.5
    stage1 : {"iqr", "isqr"}, default="iqr"
        Factor estimator: iterated quantile regression or its smoothed
        version.
    n_factors : int or "auto", default="auto"
    k_max : int, default=8
        Probe rank for rank minimisation.
    bandwidth : float, default=0.5
    restarts, max_iter, tol, random_state
        Passed to the factor solver.

    Attributes
    ----------
    delta_ : float
    lambda1_ : ndarray (r,)
    factors_ : ndarray (T, r)
    n_factors_ : int
    estimate_ : QttEstimate
    qfm_ : QuantileFactorModel
    """

    def __init__(self, tau=0.5, stage1="iqr", n_factors="auto", k_max=8, bandwidth=0.5,
                 restarts=3, max_iter=100, tol=1e-6, random_state=0):
        self.tau = tau
        self.stage1 = stage1
        self.n_factors = n_factors
        self.k_max = k_max
        self.bandwidth = bandwidth
        self.restarts = restarts
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y, d):
        """Fit on controls ``X`` (T x N), treated outcome ``y`` and indicator ``d``."""
        X = check_matrix(X, "X")
        y = check_vector(y, "y", X.shape[0])
        d = check_treatment(d, X.shape[0])
        self.qfm_ = QuantileFactorModel(
            tau=self.tau, n_factors=self.n_factors, method=self.stage1, bandwidth=self.bandwidth,
            k_max=self.k_max, restarts=self.restarts, max_iter=self.max_iter, tol=self.tol,
            random_state=self.random_state,
        ).fit(X)
        self.factors_ = self.qfm_.factors_
        self.n_factors_ = self.qfm_.n_factors_
        tag = "NQTT" if self.stage1 == "iqr" else "SQTT"
        self.estimate_ = estimate_qtt(y, d, self.factors_, self.tau, self.stage1.upper(), tag)
        self.delta_ = self.estimate_.delta
        self.lambda1_ = self.estimate_.lambda1
        return self

    def predict(self, X=None):
        """Counterfactual quantile path; ``X`` (rows of controls) defaults to the training periods."""
        check_is_fitted(self, "lambda1_")
        F = self.factors_ if X is None else self.qfm_.transform(X)
        return predict_quantile_path(self.lambda1_, F)
