"""Moving-block bootstrap for the quantile treatment effect.

Pre- and post-treatment rows ``(y_1t, f_t)`` are resampled separately in
overlapping blocks, concatenated pre then post, and the second stage is
re-run with the factors held fixed. The interval is ``delta_hat +/- 1.96
sd`` of the replicates.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_matrix, check_tau, check_treatment, check_vector
from .qr import solve_qr_batch
from .qtt import estimate_qtt, estimate_qtt_factor_interacted

__all__ = [
    "BlockPlan",
    "BootstrapError",
    "BootstrapResult",
    "InteractedBootstrapResult",
    "bootstrap_factor_interacted",
    "bootstrap_qtt",
    "draw_block_sample",
    "make_block_plan",
    "replicate_indices",
    "replicate_rng",
]

Z_95 = 1.96
MAX_DROPPED = 0.05
LOW_B = 50


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlockPlan:
    """Block sizes and block counts for the pre- and post-treatment segments."""

    block_pre: int
    block_post: int
    draws_pre: int
    draws_post: int

    @property
    def n_pre(self):
        return self.block_pre * self.draws_pre

    @property
    def n_post(self):
        return self.block_post * self.draws_post

    def to_dict(self):
        return {
            "block_pre": self.block_pre,
            "block_post": self.block_post,
            "draws_pre": self.draws_pre,
            "draws_post": self.draws_post,
            "scheme": "moving blocks, leftover rows truncated",
        }


def _cube_root_floor(n):
    b = int(round(n ** (1.0 / 3.0)))
    while b ** 3 > n:
        b -= 1
    while (b + 1) ** 3 <= n:
        b += 1
    return max(b, 1)


def make_block_plan(T0, T1, override=None):
    """Default sizes ``floor(T_d^(1/3))`` with ``floor(T_d / block)`` draws.

    ``override`` may set ``block_pre`` and/or ``block_post``; each must lie
    in ``[1, T_d]``.
    """
    T0, T1 = int(T0), int(T1)
    if T0 < 1 or T1 < 1:
        raise ValueError(f"both segments must be non-empty, got T0={T0}, T1={T1}")
    b0, b1 = _cube_root_floor(T0), _cube_root_floor(T1)
    override = dict(override or {})
    unknown = set(override) - {"block_pre", "block_post"}
    if unknown:
        raise ValueError(f"unknown block override(s) {sorted(unknown)}")
    if override.get("block_pre") is not None:
        b0 = int(override["block_pre"])
        if not 1 <= b0 <= T0:
            raise ValueError(f"pre-treatment block size {b0} outside [1, {T0}]")
    if override.get("block_post") is not None:
        b1 = int(override["block_post"])
        if not 1 <= b1 <= T1:
            raise ValueError(f"post-treatment block size {b1} outside [1, {T1}]")
    return BlockPlan(b0, b1, T0 // b0, T1 // b1)


def replicate_rng(seed, r):
    """Counter-based generator for replicate ``r`` (stream ``(seed, r)``)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(r)])))


def _block_starts(length, block, n_blocks, rng):
    return rng.integers(0, length - block + 1, size=n_blocks)


def draw_block_sample(series, block_size, n_blocks=None, rng=None):
    """Concatenate ``n_blocks`` overlapping blocks drawn uniformly with replacement.

    Parameters
    ----------
    series : array, shape (L,) or (L, k)
    block_size : int
    n_blocks : int, optional
        Defaults to ``floor(L / block_size)``.
    rng : numpy Generator, optional

    Returns
    -------
    array of ``n_blocks * block_size`` rows
    """
    S = np.asarray(series)
    L = S.shape[0]
    if not 1 <= block_size <= L:
        raise ValueError(f"block size {block_size} outside [1, {L}]")
    if n_blocks is None:
        n_blocks = L // block_size
    rng = np.random.default_rng() if rng is None else rng
    starts = _block_starts(L, block_size, n_blocks, rng)
    idx = (starts[:, None] + np.arange(block_size)).ravel()
    return S[idx]


def replicate_indices(plan, T0, T1, seed, r):
    """Row indices (0-based, into the full series) of replicate ``r``."""
    rng = replicate_rng(seed, r)
    s0 = _block_starts(T0, plan.block_pre, plan.draws_pre, rng)
    s1 = _block_starts(T1, plan.block_post, plan.draws_post, rng)
    pre = (s0[:, None] + np.arange(plan.block_pre)).ravel()
    post = T0 + (s1[:, None] + np.arange(plan.block_post)).ravel()
    return np.concatenate([pre, post])


@dataclass
class BootstrapResult:
    """Bootstrap replicates of the QTT and the normal interval built from them.

    ``percentile_ci`` is reported for reference only; the canonical interval
    is ``(ci_lower, ci_upper)``.
    """

    replicates: np.ndarray
    sd: float
    ci_lower: float
    ci_upper: float
    B: int
    seed: int
    delta_hat: float
    tau: float
    plan: BlockPlan
    dropped: int = 0
    percentile_ci: tuple = field(default=(np.nan, np.nan))
    low_B: bool = False

    def covers(self, value):
        return bool(self.ci_lower <= value <= self.ci_upper)

    def to_dict(self):
        return {
            "tau": float(self.tau),
            "delta_hat": float(self.delta_hat),
            "sd": float(self.sd),
            "ci": [float(self.ci_lower), float(self.ci_upper)],
            "B": int(self.B),
            "dropped": int(self.dropped),
            "seed": int(self.seed),
            "block_plan": self.plan.to_dict(),
            "percentile_ci": {
                "ci": [float(v) for v in self.percentile_ci],
                "canonical": False,
            },
            "low_B": bool(self.low_B),
        }

    def to_json(self):
        return json.dumps(self.to_dict())


def _usable(D, tol=1e-8):
    norms = np.linalg.norm(D, axis=1, keepdims=True)
    ok = np.all(norms[:, 0, :] > 0, axis=1)
    sv = np.linalg.svd(D / np.where(norms > 0, norms, 1.0), compute_uv=False)
    return ok & (sv[:, -1] >= tol)


def _prepare(y1, d1, F_tilde, tau, B, plan):
    tau = check_tau(tau)
    F = check_matrix(np.asarray(F_tilde, dtype=float).reshape(len(F_tilde), -1), "F_tilde")
    T = F.shape[0]
    y = check_vector(y1, "y1", T)
    d = check_treatment(d1, T)
    B = int(B)
    if B < 2:
        raise ValueError(f"need at least 2 replicates, got B={B}")
    if B < LOW_B:
        warnings.warn(f"B={B} replicates give an unreliable standard deviation", stacklevel=3)
    T0 = int(np.argmax(d))
    if plan is None:
        plan = make_block_plan(T0, T - T0)
    return y, d, F, tau, B, plan, T0


def _replicates(y, F, tau, B, plan, T0, seed, design):
    """Coefficient vectors of ``B`` replicates; NaN rows for unusable designs."""
    T1 = y.size - T0
    idx = np.stack([replicate_indices(plan, T0, T1, seed, r) for r in range(B)])
    # blocks never mix regimes
    assert np.all(idx[:, : plan.n_pre] < T0) and np.all(idx[:, plan.n_pre:] >= T0)
    d_star = np.broadcast_to(np.concatenate([np.zeros(plan.n_pre), np.ones(plan.n_post)]),
                             idx.shape)
    D = design(F[idx], d_star[..., None])
    ok = _usable(D)
    coefs = np.full((B, D.shape[2]), np.nan)
    if ok.any():
        coefs[ok] = solve_qr_batch(D[ok], y[idx][ok], tau)
    good = np.all(np.isfinite(coefs), axis=1)
    dropped = int(B - good.sum())
    if dropped > MAX_DROPPED * B:
        raise BootstrapError(f"{dropped} of {B} bootstrap replicates failed (more than 5%)")
    return coefs[good], dropped


def _summary(reps, B, seed, est, tau, plan, dropped):
    sd = float(np.std(reps, ddof=1)) if reps.size > 1 else 0.0
    pct = tuple(np.percentile(reps, [2.5, 97.5])) if reps.size else (np.nan, np.nan)
    return BootstrapResult(reps, sd, est - Z_95 * sd, est + Z_95 * sd, B, int(seed), float(est),
                           tau, plan, dropped, pct, B < LOW_B)


def bootstrap_qtt(y1, d1, F_tilde, tau, B=300, plan=None, seed=0, delta_hat=None):
    """Moving-block bootstrap of the second-stage QTT.

    Parameters
    ----------
    y1 : array (T,)
    d1 : array (T,)
        Zeros then ones.
    F_tilde : array (T, r)
        Stage-one factors; they are held fixed across replicates.
    tau : float
    B : int
        Number of replicates.
    plan : BlockPlan, optional
        Defaults to :func:`make_block_plan` on the segment lengths.
    seed : int
        Replicate ``r`` draws from stream ``(seed, r)``.
    delta_hat : float, optional
        Point estimate on the original data; computed when omitted.

    Returns
    -------
    BootstrapResult
    """
    y, d, F, tau, B, plan, T0 = _prepare(y1, d1, F_tilde, tau, B, plan)
    if delta_hat is None:
        delta_hat = estimate_qtt(y, d, F, tau).delta
    coefs, dropped = _replicates(y, F, tau, B, plan, T0, seed,
                                 lambda Fs, ds: np.concatenate([Fs, ds], axis=2))
    return _summary(coefs[:, -1], B, seed, delta_hat, tau, plan, dropped)


@dataclass
class InteractedBootstrapResult:
    """Bootstrap of the factor-interacted effect ``zeta0 + zeta1' f_t``.

    The moving-block argument is not known to cover this model, so the
    intervals are labelled heuristic.
    """

    zeta0: BootstrapResult
    zeta1: list
    inference: str = "heuristic"

    def to_dict(self):
        return {"zeta0": self.zeta0.to_dict(), "zeta1": [z.to_dict() for z in self.zeta1],
                "inference": self.inference}


def bootstrap_factor_interacted(y1, d1, F_tilde, tau, B=300, plan=None, seed=0):
    """Moving-block bootstrap of :func:`estimate_qtt_factor_interacted`."""
    y, d, F, tau, B, plan, T0 = _prepare(y1, d1, F_tilde, tau, B, plan)
    fit = estimate_qtt_factor_interacted(y, d, F, tau)
    coefs, dropped = _replicates(y, F, tau, B, plan, T0, seed,
                                 lambda Fs, ds: np.concatenate([Fs, Fs * ds, ds], axis=2))
    r = F.shape[1]
    z0 = _summary(coefs[:, -1], B, seed, fit.zeta0, tau, plan, dropped)
    z1 = [_summary(coefs[:, r + j], B, seed, fit.zeta1[j], tau, plan, dropped) for j in range(r)]
    return InteractedBootstrapResult(z0, z1)
