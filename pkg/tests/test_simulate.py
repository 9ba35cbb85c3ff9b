"""Data-generating processes, metrics and the Monte-Carlo driver."""

import json

import numpy as np
import pytest
from scipy import stats

from qttfactor.simulate import DgpSpec, generate, mc_metrics, run_mc


def test_generate_shapes_and_treatment():
    panel, truth = generate(DgpSpec("baseline", N=20, T=30, seed=1))
    assert panel.outcomes.shape == (21, 30)
    assert panel.treated_unit_ids == (1,) and panel.T0 == 15
    assert truth.factors.shape == (30, 3)
    assert truth.r0(0.5) == 2 and truth.r0(0.25) == 3


def test_generate_is_deterministic_and_replications_differ():
    spec = DgpSpec("baseline", N=10, T=20, seed=3)
    a, _ = generate(spec, 0)
    b, _ = generate(spec, 0)
    c, _ = generate(spec, 1)
    assert a == b and not np.array_equal(a.outcomes, c.outcomes)


@pytest.mark.parametrize("tau", [0.1, 0.25, 0.5, 0.9])
def test_true_effects_match_quantile_functions(tau):
    _, truth = generate(DgpSpec("baseline", N=5, T=10))
    assert truth.delta0(tau) == pytest.approx(0.5 + stats.norm.ppf(tau), abs=1e-12)
    _, truth = generate(DgpSpec("heavy_tail", N=5, T=10))
    assert truth.delta0(tau) == pytest.approx(0.5 + stats.t.ppf(tau, 2), abs=1e-12)


def test_treated_effect_is_error_plus_half():
    spec = DgpSpec("baseline", N=5, T=10, seed=2)
    panel, truth = generate(spec)
    rng = np.random.default_rng(np.random.SeedSequence([2, 0, 2]))
    u = rng.standard_normal((6, 10))
    F = truth.factors
    lam = np.random.default_rng(np.random.SeedSequence([2, 0, 1]))
    l12 = lam.standard_normal((2, 6))
    l3 = lam.uniform(1.0, 2.0, 6)
    y0 = l12[0, 0] * F[:, 0] + l12[1, 0] * F[:, 1] + l3[0] * F[:, 2] * u[0]
    expect = y0 + np.where(np.arange(10) >= 5, u[0] + 0.5, 0.0)
    assert np.allclose(panel.outcomes[0], expect)


def test_dependent_reduces_to_heavy_tail():
    a, _ = generate(DgpSpec("heavy_tail", N=8, T=12, seed=4))
    b, _ = generate(DgpSpec("dependent", N=8, T=12, seed=4, ar=0.0, weight=0.0, df=2.0))
    assert np.array_equal(a.outcomes, b.outcomes)


def test_dependent_truth_is_symmetric():
    _, truth = generate(DgpSpec("dependent", N=8, T=12))
    assert truth.delta0(0.5) == 0.5
    assert truth.delta0(0.1) - 0.5 == pytest.approx(0.5 - truth.delta0(0.9), abs=1e-12)


def test_quantile_variant_ranks():
    spec = DgpSpec("quantile_variant", N=8, T=12)
    _, truth = generate(spec)
    assert [truth.r0(t) for t in (0.1, 0.5, 0.9)] == [4, 5, 6]
    assert spec.ic_range == (2, 8)


def test_spec_validation():
    with pytest.raises(ValueError, match="family"):
        DgpSpec("weird")
    with pytest.raises(ValueError):
        DgpSpec(N=1)
    with pytest.raises(ValueError):
        DgpSpec("dependent", N=4, J=3)


def test_mc_metrics_identity(rng):
    d = rng.standard_normal(50) + 0.2
    m = mc_metrics(d, 0.0, sds=[1.0, 3.0], covered=[True, False, True, True])
    assert m["rmse"] ** 2 == pytest.approx(m["bias"] ** 2 + m["mc_sd"] ** 2)
    assert m["sd"] == 2.0 and m["coverage"] == 0.75
    assert np.isnan(mc_metrics(d, 0.0)["coverage"])


def test_run_mc_smoke(tmp_path):
    spec = DgpSpec("baseline", N=30, T=40, seed=0)
    rep = run_mc(spec, taus=(0.5,), R=3, B=50, k_max=4, restarts=1)
    assert {c.estimator for c in rep.cells} == {"NQTT", "SQTT", "Oracle", "GSCM"}
    for c in rep.cells:
        assert c.n_ok + c.n_failed == 3 and np.isfinite(c.bias)
    assert np.isfinite(rep.cell(0.5, "NQTT").coverage)
    rep.to_csv(tmp_path / "r.csv")
    rep.write_raw(tmp_path / "raw.jsonl")
    lines = (tmp_path / "raw.jsonl").read_text().splitlines()
    assert len(lines) == 12 and "delta" in json.loads(lines[0])
    again = run_mc(spec, taus=(0.5,), R=3, B=50, k_max=4, restarts=1)
    assert [r.get("delta") for r in again.records] == [r.get("delta") for r in rep.records]


def test_run_mc_rejects_unknown_estimator():
    with pytest.raises(ValueError):
        run_mc(DgpSpec(N=10, T=20), estimators=("OLS",), R=1)
