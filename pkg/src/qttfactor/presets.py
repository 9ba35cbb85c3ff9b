"""Desk-scale reference experiments with pass/fail checks.

Each preset fixes a simulation design and a check on the resulting report.
They back both the ``simulate --preset`` command and the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .panel import split_control_treated
from .qfm import select_rank
from .simulate import DgpSpec, generate, run_mc

__all__ = ["PRESETS", "Preset", "PresetResult", "rank_frequency", "run_preset"]


@dataclass
class PresetResult:
    name: str
    passed: bool
    summary: str
    report: object = None


@dataclass
class Preset:
    name: str
    description: str
    spec: DgpSpec | None
    estimators: tuple = ()
    taus: tuple = ()
    R: int = 200
    B: int = 0
    check: Callable | None = None
    runner: Callable | None = None
    extra: dict = field(default_factory=dict)


def _check_median(rep):
    c = rep.cell(0.5, "NQTT")
    ok = abs(c.bias) <= 0.05 and 0.12 <= c.rmse <= 0.21 and not c.invalid
    return ok, f"NQTT bias={c.bias:+.4f} (|.|<=0.05), RMSE={c.rmse:.4f} (in [0.12, 0.21])"


def _check_tail(rep):
    g, n = rep.cell(0.1, "GSCM"), rep.cell(0.1, "NQTT")
    ok = (g.bias <= -1.4 and abs(n.bias) <= 0.2 and abs(g.bias) > 5 * abs(n.bias)
          and not (g.invalid or n.invalid))
    return ok, (f"GSCM bias={g.bias:+.4f} (<=-1.4), NQTT bias={n.bias:+.4f} (|.|<=0.2), "
                f"ratio={abs(g.bias) / max(abs(n.bias), 1e-12):.1f} (>5)")


def _check_coverage(rep):
    c = rep.cell(0.5, "SQTT")
    ok = 0.90 <= c.coverage <= 0.99 and not c.invalid
    return ok, f"SQTT coverage={c.coverage:.3f} (in [0.90, 0.99]), mean bootstrap SD={c.sd:.4f}"


def _check_heavy(rep):
    c = rep.cell(0.5, "NQTT")
    ok = abs(c.bias) <= 0.08 and c.rmse <= 0.45 and not c.invalid
    return ok, f"NQTT bias={c.bias:+.4f} (|.|<=0.08), RMSE={c.rmse:.4f} (<=0.45)"


def _check_variant(rep):
    n, g = rep.cell(0.5, "NQTT"), rep.cell(0.1, "GSCM")
    ok = abs(n.bias) <= 0.12 and abs(g.bias) >= 1.0 and not (n.invalid or g.invalid)
    return ok, f"NQTT bias at 0.5={n.bias:+.4f} (|.|<=0.12), GSCM bias at 0.1={g.bias:+.4f} (|.|>=1.0)"


def rank_frequency(N=200, T=200, seeds=50, taus=(0.25, 0.5), k=8, opts=None, progress=None):
    """Share of seeds where rank minimisation returns the true rank, per tau."""
    hits = {t: 0 for t in taus}
    ranks = {t: [] for t in taus}
    for s in range(seeds):
        panel, truth = generate(DgpSpec("baseline", N, T, seed=s))
        controls, _ = split_control_treated(panel)
        for t in taus:
            o = dict(opts or {})
            o.setdefault("seed", s)
            r = select_rank(controls, t, k, o).r_hat
            ranks[t].append(r)
            hits[t] += r == truth.r0(t)
        if progress is not None:
            progress(s + 1, seeds)
    return {t: hits[t] / seeds for t in taus}, ranks


def _run_rank(preset, progress=None):
    freq, ranks = rank_frequency(seeds=preset.extra["seeds"], progress=progress)
    ok = all(v >= 0.9 for v in freq.values())
    parts = []
    for t, v in freq.items():
        counts = {int(k): int(c) for k, c in zip(*np.unique(ranks[t], return_counts=True))}
        parts.append(f"tau={t}: {v:.2f} (counts {counts})")
    return PresetResult(preset.name, ok, "P[r_hat = r0] " + "; ".join(parts) + " (>=0.90)",
                        {"frequency": freq, "ranks": ranks})


PRESETS = {
    p.name: p
    for p in [
        Preset("table1-median", "baseline N=200 T=400, NQTT at the median",
               DgpSpec("baseline", 200, 400), ("NQTT",), (0.5,), check=_check_median),
        Preset("table1-tail", "baseline N=100 T=200, GSCM vs NQTT at tau=0.1",
               DgpSpec("baseline", 100, 200), ("NQTT", "GSCM"), (0.1,), check=_check_tail),
        Preset("table2-coverage", "baseline N=100 T=200, SQTT bootstrap coverage at the median",
               DgpSpec("baseline", 100, 200), ("SQTT",), (0.5,), B=300, check=_check_coverage),
        Preset("heavy-tail", "t(2) errors N=100 T=200, NQTT at the median",
               DgpSpec("heavy_tail", 100, 200), ("NQTT",), (0.5,), check=_check_heavy),
        Preset("rank-selection", "baseline N=T=200, rank minimisation over 50 seeds",
               None, runner=_run_rank, extra={"seeds": 50}),
        Preset("quantile-variant", "regime DGP N=100 T=200, NQTT at 0.5 and GSCM at 0.1",
               DgpSpec("quantile_variant", 100, 200), ("NQTT", "GSCM"), (0.1, 0.5),
               check=_check_variant),
    ]
}


def run_preset(name, R=None, B=None, seed=None, n_jobs=1, progress=None):
    """Run a named preset; ``R``, ``B`` and ``seed`` override its defaults."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    if p.runner is not None:
        return p.runner(p, progress=progress)
    spec = p.spec if seed is None else DgpSpec(**{**p.spec.__dict__, "seed": int(seed)})
    rep = run_mc(spec, p.estimators, p.taus, R=p.R if R is None else R,
                 B=p.B if B is None else B, n_jobs=n_jobs, progress=progress)
    ok, msg = p.check(rep)
    return PresetResult(name, ok, msg, rep)
