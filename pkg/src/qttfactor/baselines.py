"""Comparator estimators: PCA-factor synthetic control and the oracle.

The PCA route estimates one set of factors by principal components (the
number chosen by an information criterion) and reuses them at every
quantile; the oracle plugs the true factors into the same second stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_matrix
from .panel import split_control_treated
from .qfm import _sign_fix
from .qtt import estimate_qtt

__all__ = [
    "PcaFit",
    "gscm_qtt",
    "information_criterion",
    "oracle_qtt",
    "pca_factors",
    "select_rank_ic",
]


@dataclass
class PcaFit:
    factors: np.ndarray
    loadings: np.ndarray
    r: int
    ic_values: dict = field(default_factory=dict)


def _pca(Y, r):
    N, T = Y.shape
    # right singular vectors of Y are the eigenvectors of Y'Y
    _, _, Vt = np.linalg.svd(Y, full_matrices=False)
    F = Vt[:r].T * np.sqrt(T)
    L = Y @ F / T
    return _sign_fix(F.copy(), L.copy())


def pca_factors(controls, r):
    """Principal-component factors of an N x T block (no demeaning).

    Factors are ``sqrt(T)`` times the leading eigenvectors of ``Y'Y``, so
    ``F'F/T = I``; loadings are least squares ``Y F / T``.
    """
    Y = check_matrix(controls, "controls")
    r = int(r)
    if not 1 <= r < min(Y.shape):
        raise ValueError(f"rank r={r} must satisfy 1 <= r < min(N, T)={min(Y.shape)}")
    F, L = _pca(Y, r)
    return PcaFit(F, L, r)


def information_criterion(controls, r):
    """``ln(SSR / NT) + r (N + T)/(NT) ln(NT / (N + T))`` for rank ``r``."""
    Y = check_matrix(controls, "controls")
    N, T = Y.shape
    F, L = _pca(Y, r)
    ssr = float(np.sum((Y - L @ F.T) ** 2))
    NT = N * T
    return np.log(ssr / NT) + r * (N + T) / NT * np.log(NT / (N + T))


def select_rank_ic(controls, r_min=2, r_max=5, return_values=False):
    """Rank minimising the information criterion over ``r_min..r_max`` (ties to smaller r)."""
    Y = check_matrix(controls, "controls")
    r_min, r_max = int(r_min), int(r_max)
    if r_min < 1 or r_max < r_min:
        raise ValueError(f"invalid rank range [{r_min}, {r_max}]")
    r_max = min(r_max, min(Y.shape) - 1)
    N, T = Y.shape
    _, s, _ = np.linalg.svd(Y, full_matrices=False)
    total = float(np.sum(Y * Y))
    NT = N * T
    vals = {}
    for r in range(r_min, r_max + 1):
        ssr = max(total - float(np.sum(s[:r] ** 2)), 1e-300)
        vals[r] = np.log(ssr / NT) + r * (N + T) / NT * np.log(NT / (N + T))
    best = min(vals, key=lambda k: (vals[k], k))
    return (best, vals) if return_values else best


def _treated(panel):
    _, treated = split_control_treated(panel)
    return treated[0], panel.d


def gscm_qtt(panel, tau, rank_range=(2, 5), pca=None):
    """PCA-factor QTT at one or several quantile levels.

    The factors are estimated once, independent of ``tau``; pass ``pca`` to
    reuse a previous fit. Returns one estimate, or a list when ``tau`` is a
    sequence.
    """
    if pca is None:
        controls = panel.first_stage_block()
        r, vals = select_rank_ic(controls, *rank_range, return_values=True)
        pca = pca_factors(controls, r)
        pca.ic_values = vals
    y1, d1 = _treated(panel)
    taus = np.atleast_1d(tau)
    out = [estimate_qtt(y1, d1, pca.factors, t, stage1="PCA", estimator="GSCM") for t in taus]
    return out if np.ndim(tau) else out[0]


def oracle_qtt(panel, tau, true_factors):
    """Second stage with the true factor paths (simulation only)."""
    y1, d1 = _treated(panel)
    F = np.asarray(true_factors, dtype=float)
    return estimate_qtt(y1, d1, F, tau, stage1="truth", estimator="Oracle")
