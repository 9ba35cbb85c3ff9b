"""Input validation shared by the estimators."""

import numpy as np


def check_tau(tau):
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in the open interval (0, 1), got {tau}")
    return tau


def check_matrix(A, name="array", min_rows=1, min_cols=1):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {A.shape}")
    if A.shape[0] < min_rows or A.shape[1] < min_cols:
        raise ValueError(f"{name} has shape {A.shape}; need at least {min_rows}x{min_cols}")
    if not np.all(np.isfinite(A)):
        bad = np.argwhere(~np.isfinite(A))[0]
        raise ValueError(f"{name} has a non-finite entry at {tuple(int(i) for i in bad)}")
    return A


def check_vector(v, name="vector", length=None):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        v = v.ravel()
    if length is not None and v.shape[0] != length:
        raise ValueError(f"{name} has length {v.shape[0]}, expected {length}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def check_treatment(d, length=None):
    """Binary, non-decreasing treatment path with both regimes present."""
    d = check_vector(d, "treatment indicator", length)
    if not np.all((d == 0) | (d == 1)):
        raise ValueError("treatment indicator must be binary")
    if np.any(np.diff(d) < 0):
        raise ValueError("non-monotone treatment indicator")
    if d.min() == d.max():
        raise ValueError("treatment indicator must have both pre- and post-treatment periods")
    return d
