"""Monte-Carlo harness: data-generating processes and estimator metrics.

Four designs are available. ``baseline`` has two AR factors in the mean
and a third, ``|g_t|``, scaling the error, so off the median a third
factor appears. ``heavy_tail`` swaps the errors to t(2), ``dependent`` uses
serially and cross-sectionally correlated t(3) errors, and
``quantile_variant`` switches factors on and off by error regime. Unit 1
is treated from period ``T0 + 1`` on, with effect ``u_1t + 0.5``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

from .baselines import gscm_qtt, oracle_qtt, pca_factors, select_rank_ic
from .inference import bootstrap_qtt
from .panel import PanelData, split_control_treated
from .qfm import fit_iqr, fit_isqr, select_rank
from .qr import SmoothingSpec
from .qtt import estimate_qtt

__all__ = [
    "ESTIMATORS",
    "FAMILIES",
    "DgpSpec",
    "McCell",
    "McReport",
    "Truth",
    "generate",
    "mc_metrics",
    "run_mc",
]

logger = logging.getLogger(__name__)

FAMILIES = ("baseline", "heavy_tail", "dependent", "quantile_variant")
ESTIMATORS = ("NQTT", "SQTT", "Oracle", "GSCM")
ROLE_FACTORS, ROLE_LOADINGS, ROLE_ERRORS = 0, 1, 2
MAX_FAILED = 0.05


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design.

    ``N`` is the number of control units (the panel has ``N + 1`` rows, the
    first treated). ``T0`` defaults to ``T // 2``. The ``dependent`` family
    uses ``ar``, ``weight``, ``J`` (neighbours on each side, wrapping
    around the cross-section) and ``df``.
    """

    family: str = "baseline"
    N: int = 100
    T: int = 200
    seed: int = 0
    T0: int | None = None
    burn_in: int = 100
    J: int = 3
    ar: float = 0.2
    weight: float = 0.2
    df: float = 3.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown DGP family {self.family!r}; choose from {FAMILIES}")
        if self.N < 2 or self.T < 4:
            raise ValueError(f"need N >= 2 and T >= 4, got N={self.N}, T={self.T}")
        if self.T0 is not None and not 1 <= self.T0 < self.T:
            raise ValueError(f"T0={self.T0} must lie in [1, T)")
        if self.family == "dependent" and (self.J < 0 or 2 * self.J + 1 > self.N + 1):
            raise ValueError(f"neighbour radius J={self.J} too large for N={self.N}")
        if not 0 <= self.ar < 1:
            raise ValueError("ar must lie in [0, 1)")
        if self.df <= 0:
            raise ValueError("df must be positive")

    @property
    def pre_periods(self):
        return self.T // 2 if self.T0 is None else self.T0

    @property
    def ic_range(self):
        return (2, 8) if self.family == "quantile_variant" else (2, 5)


@dataclass
class Truth:
    """True effect and factor structure of one simulated panel."""

    family: str
    factors: np.ndarray
    spec: DgpSpec

    def delta0(self, tau):
        return _delta0(self.spec, tau)

    def r0(self, tau):
        if self.family == "quantile_variant":
            return 4 if tau <= 0.3 else (5 if tau <= 0.8 else 6)
        return 2 if tau == 0.5 else 3


# ---------------------------------------------------------------------------
# truth


@lru_cache(maxsize=32)
def _dependent_quantiles(ar, weight, J, df, n=1_000_000, seed=12345):
    """Sorted draws from the stationary marginal of the dependent error."""
    rng = np.random.default_rng(seed)
    lags = max(1, int(np.ceil(np.log(1e-12) / np.log(ar)))) if ar > 0 else 1
    u = np.zeros(n)
    for k in range(lags):
        innov = rng.standard_t(df, n)
        if weight and J:
            innov = innov + weight * rng.standard_t(df, (2 * J, n)).sum(0)
        u += ar ** k * innov
    # the marginal is symmetric; symmetrise the sample
    return np.sort(np.concatenate([u, -u]))


def _delta0(spec, tau):
    tau = float(tau)
    if spec.family == "heavy_tail":
        return 0.5 + float(stats.t.ppf(tau, 2))
    if spec.family == "dependent":
        if tau == 0.5:
            return 0.5
        draws = _dependent_quantiles(spec.ar, spec.weight, spec.J, spec.df)
        return 0.5 + float(np.quantile(draws, tau))
    return 0.5 + float(stats.norm.ppf(tau))


# ---------------------------------------------------------------------------
# generation


def _streams(spec, replication):
    return [
        np.random.default_rng(np.random.SeedSequence([spec.seed, replication, role]))
        for role in (ROLE_FACTORS, ROLE_LOADINGS, ROLE_ERRORS)
    ]


def _ar1(rng, rho, T, burn):
    f = np.empty(T + burn)
    f[0] = rng.normal(0.0, 1.0 / np.sqrt(1.0 - rho * rho))
    nu = rng.standard_normal(T + burn - 1)
    for t in range(1, T + burn):
        f[t] = rho * f[t - 1] + nu[t - 1]
    return f[burn:]


def _dependent_errors(rng, spec, n):
    T, burn = spec.T, spec.burn_in
    e_main = rng.standard_t(spec.df, (n, T))
    if spec.ar == 0 and spec.weight == 0:
        return e_main
    e_burn = rng.standard_t(spec.df, (n, burn))
    e = np.concatenate([e_burn, e_main], axis=1)
    innov = e.copy()
    if spec.weight:
        for s in range(1, spec.J + 1):
            innov += spec.weight * (np.roll(e, s, axis=0) + np.roll(e, -s, axis=0))
    u = np.empty_like(innov)
    u[:, 0] = innov[:, 0]
    for t in range(1, T + burn):
        u[:, t] = spec.ar * u[:, t - 1] + innov[:, t]
    return u[:, burn:]


def generate(spec, replication=0):
    """Simulate one panel.

    Returns ``(PanelData, Truth)``; unit 1 is treated. Factors, loadings and
    errors come from separate streams keyed by ``(seed, replication, role)``.
    """
    rf, rl, re = _streams(spec, replication)
    N1, T, burn = spec.N + 1, spec.T, spec.burn_in
    f1 = _ar1(rf, 0.8, T, burn)
    f2 = _ar1(rf, 0.5, T, burn)
    if spec.family == "quantile_variant":
        extra = rf.standard_normal((3, T))
        f6 = np.abs(rf.standard_normal(T))
        lam = rl.standard_normal((5, N1))
        lam6 = rl.uniform(1.0, 2.0, N1)
        v = re.uniform(0.0, 1.0, (N1, T))
        u = stats.norm.ppf(v)
        F = np.column_stack([f1, f2, extra[0], extra[1], extra[2], f6])
        y0 = (
            np.outer(lam[0], f1) + np.outer(lam[1], f2) + np.outer(lam[2], extra[0])
            + (v > 0.3) * np.outer(lam[3], extra[1])
            + (v > 0.8) * np.outer(lam[4], extra[2])
            + np.outer(lam6, f6) * u
        )
    else:
        f3 = np.abs(rf.standard_normal(T))
        lam = rl.standard_normal((2, N1))
        lam3 = rl.uniform(1.0, 2.0, N1)
        if spec.family == "baseline":
            u = re.standard_normal((N1, T))
        elif spec.family == "heavy_tail":
            u = re.standard_t(2, (N1, T))
        else:
            u = _dependent_errors(re, spec, N1)
        F = np.column_stack([f1, f2, f3])
        y0 = np.outer(lam[0], f1) + np.outer(lam[1], f2) + np.outer(lam3, f3) * u
    T0 = spec.pre_periods
    y = y0.copy()
    y[0, T0:] += u[0, T0:] + 0.5
    panel = PanelData(y, (1,), T0 + 1)
    return panel, Truth(spec.family, F, spec)


# ---------------------------------------------------------------------------
# metrics


def mc_metrics(estimates, delta0, sds=None, covered=None):
    """Bias, RMSE, Monte-Carlo SD, mean bootstrap SD and coverage.

    ``bias = mean(d - d0)``, ``rmse = sqrt(mean((d - d0)^2))``; ``mc_sd`` is
    the population SD of the estimates so that ``rmse^2 = bias^2 + mc_sd^2``.
    """
    d = np.asarray(estimates, dtype=float)
    err = d - delta0
    out = {
        "bias": float(err.mean()),
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "mc_sd": float(d.std()),
        "sd": float("nan"),
        "coverage": float("nan"),
    }
    if sds is not None and len(sds):
        out["sd"] = float(np.mean(sds))
    if covered is not None and len(covered):
        out["coverage"] = float(np.mean(np.asarray(covered, dtype=float)))
    return out


@dataclass
class McCell:
    family: str
    N: int
    T: int
    tau: float
    estimator: str
    delta0: float
    bias: float
    rmse: float
    mc_sd: float
    sd: float
    coverage: float
    n_ok: int
    n_failed: int
    invalid: bool
    mean_rank: float = float("nan")


@dataclass
class McReport:
    cells: list
    R: int
    B: int
    spec: DgpSpec
    records: list = field(default_factory=list)
    seconds: float = 0.0
    metadata: dict = field(default_factory=dict)

    def cell(self, tau, estimator):
        for c in self.cells:
            if c.estimator == estimator and np.isclose(c.tau, tau):
                return c
        raise KeyError((tau, estimator))

    @property
    def any_invalid(self):
        return any(c.invalid for c in self.cells)

    def to_csv(self, path):
        names = list(McCell.__dataclass_fields__)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for c in self.cells:
                w.writerow(asdict(c))

    def write_raw(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# driver


@dataclass
class _McOptions:
    k_max: int = 8
    bandwidth: float = 0.5
    restarts: int = 3
    max_iter: int = 100
    tol_obj: float = 1e-6


def _one_replication(spec, rep, estimators, taus, B, o):
    panel, truth = generate(spec, rep)
    controls, treated = split_control_treated(panel)
    y1, d1 = treated[0], panel.d
    fopts = {"restarts": o.restarts, "max_iter": o.max_iter, "tol_obj": o.tol_obj,
             "seed": int(np.random.SeedSequence([spec.seed, rep, 3]).generate_state(1)[0])}
    recs = []

    def record(tau, est, fn):
        t0 = time.perf_counter()
        rec = {"rep": rep, "tau": tau, "estimator": est, "delta0": truth.delta0(tau)}
        try:
            rec.update(fn())
        except Exception as exc:  # recorded and excluded from the metrics
            logger.warning("replication %d, %s at tau=%g failed: %s", rep, est, tau, exc)
            rec["error"] = f"{type(exc).__name__}: {exc}"
        rec["seconds"] = time.perf_counter() - t0
        recs.append(rec)

    gscm = None
    for tau in taus:
        sel = None
        if "NQTT" in estimators or "SQTT" in estimators:
            try:
                sel = select_rank(controls, tau, o.k_max, fopts)
            except Exception as exc:
                sel = exc

        def factor_qtt(stage1):
            if isinstance(sel, Exception):
                raise sel
            r = max(1, sel.r_hat)
            if stage1 == "IQR":
                fit = sel.fit if r == sel.k else fit_iqr(controls, tau, r, fopts)
            else:
                fit = fit_isqr(controls, tau, r, SmoothingSpec(o.bandwidth), fopts)
            est = estimate_qtt(y1, d1, fit.factors, tau, stage1)
            out = {"delta": est.delta, "r_hat": r}
            if B > 0:
                seed = int(np.random.SeedSequence([spec.seed, rep, 4]).generate_state(1)[0])
                bs = bootstrap_qtt(y1, d1, fit.factors, tau, B, seed=seed, delta_hat=est.delta)
                out.update(sd=bs.sd, ci=[bs.ci_lower, bs.ci_upper],
                           covered=bs.covers(truth.delta0(tau)), dropped=bs.dropped)
            return out

        if "NQTT" in estimators:
            record(tau, "NQTT", lambda: factor_qtt("IQR"))
        if "SQTT" in estimators:
            record(tau, "SQTT", lambda: factor_qtt("ISQR"))
        if "Oracle" in estimators:
            record(tau, "Oracle", lambda: {"delta": oracle_qtt(panel, tau, truth.factors).delta})
        if "GSCM" in estimators:
            def run_gscm():
                nonlocal gscm
                if gscm is None:
                    r = select_rank_ic(controls, *spec.ic_range)
                    gscm = pca_factors(controls, r)
                return {"delta": gscm_qtt(panel, tau, pca=gscm).delta, "r_hat": gscm.r}
            record(tau, "GSCM", run_gscm)
    return recs


def run_mc(spec, estimators=ESTIMATORS, taus=(0.1, 0.25, 0.5, 0.75, 0.9), R=200, B=0,
           n_jobs=1, k_max=8, bandwidth=0.5, restarts=3, max_iter=100, tol_obj=1e-6,
           progress=None):
    """Run ``R`` replications of ``spec`` and summarise each (tau, estimator) cell.

    Bootstrap coverage is computed for NQTT and SQTT when ``B > 0``. Failed
    replications are recorded and excluded; a cell with more than 5%
    failures is flagged invalid. ``n_jobs > 1`` distributes replications
    with joblib; results do not depend on scheduling.
    """
    estimators = tuple(estimators)
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad:
        raise ValueError(f"unknown estimator(s) {bad}; choose from {ESTIMATORS}")
    taus = tuple(float(t) for t in np.atleast_1d(taus))
    o = _McOptions(k_max, bandwidth, restarts, max_iter, tol_obj)
    t_start = time.perf_counter()
    if n_jobs == 1:
        per_rep = []
        for rep in range(R):
            per_rep.append(_one_replication(spec, rep, estimators, taus, B, o))
            if progress is not None:
                progress(rep + 1, R)
    else:
        from joblib import Parallel, delayed

        per_rep = Parallel(n_jobs=n_jobs)(
            delayed(_one_replication)(spec, rep, estimators, taus, B, o) for rep in range(R)
        )
    records = [rec for recs in per_rep for rec in recs]
    cells = []
    for tau in taus:
        d0 = _delta0(spec, tau)
        for est in estimators:
            rs = [x for x in records if x["estimator"] == est and x["tau"] == tau]
            ok = [x for x in rs if "error" not in x]
            n_failed = len(rs) - len(ok)
            if ok:
                m = mc_metrics(
                    [x["delta"] for x in ok], d0,
                    [x["sd"] for x in ok if "sd" in x],
                    [x["covered"] for x in ok if "covered" in x],
                )
            else:
                m = dict.fromkeys(("bias", "rmse", "mc_sd", "sd", "coverage"), float("nan"))
            ranks = [x["r_hat"] for x in ok if "r_hat" in x]
            cells.append(McCell(
                spec.family, spec.N, spec.T, tau, est, d0, n_ok=len(ok), n_failed=n_failed,
                invalid=n_failed > MAX_FAILED * max(len(rs), 1) or not ok,
                mean_rank=float(np.mean(ranks)) if ranks else float("nan"), **m,
            ))
    meta = {"T0": spec.pre_periods, "ic_range": list(spec.ic_range), "k_max": k_max,
            "bandwidth": bandwidth, "restarts": restarts}
    if spec.family == "dependent":
        meta.update(J=spec.J, neighbours="circular", ar=spec.ar, weight=spec.weight, df=spec.df)
    return McReport(cells, R, B, spec, records, time.perf_counter() - t_start, meta)
