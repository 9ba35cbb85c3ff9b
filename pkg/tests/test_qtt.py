"""Second-stage QTT estimators."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qttfactor.panel import split_control_treated, treatment_indicator
from qttfactor.qtt import (
    CollinearityError,
    QttEstimator,
    UnitFailure,
    estimate_qtt,
    estimate_qtt_factor_interacted,
    estimate_qtt_multi,
    estimate_qtt_time_varying,
    fit_first_stage,
    predict_quantile_path,
)

from conftest import rank_panel


def second_stage_data(seed=0, T=60, r=2, delta=0.8):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((T, r))
    d = treatment_indicator(T, T // 2)
    y = F @ rng.standard_normal(r) + delta * d + rng.standard_normal(T)
    return y, d, F


def test_exact_fit_noiseless():
    rng = np.random.default_rng(1)
    F = rng.standard_normal((40, 2))
    d = treatment_indicator(40, 20)
    y = F @ [1.5, -0.7] + 1.25 * d
    est = estimate_qtt(y, d, F, 0.5)
    assert est.delta == pytest.approx(1.25, abs=1e-10)
    assert np.allclose(est.lambda1, [1.5, -0.7], atol=1e-10)
    assert np.allclose(predict_quantile_path(est.lambda1, F), F @ [1.5, -0.7])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.1, 0.5, 0.9]))
def test_rotation_and_sign_invariance(seed, tau):
    y, d, F = second_stage_data(seed)
    rng = np.random.default_rng(seed + 1)
    A = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    S = np.diag([-1.0, 1.0])
    base = estimate_qtt(y, d, F, tau)
    rot = estimate_qtt(y, d, F @ A, tau)
    flip = estimate_qtt(y, d, F @ S, tau)
    obj = lambda e, G: np.sum((y - G @ e.lambda1 - e.delta * d) * (tau - (y - G @ e.lambda1 - e.delta * d <= 0)))
    # the fitted objective is invariant; at a unique optimum so is delta
    assert obj(rot, F @ A) == pytest.approx(obj(base, F), rel=1e-9, abs=1e-9)
    assert flip.delta == pytest.approx(base.delta, abs=1e-9)
    assert rot.delta == pytest.approx(base.delta, abs=1e-7)


def test_collinear_treatment_rejected():
    y, d, F = second_stage_data()
    with pytest.raises(CollinearityError, match="spanned by factors"):
        estimate_qtt(y, d, np.column_stack([F, 3 * d]), 0.5)


def test_input_validation():
    y, d, F = second_stage_data()
    with pytest.raises(ValueError):
        estimate_qtt(y[:-1], d, F, 0.5)
    with pytest.raises(ValueError):
        estimate_qtt(y, d[::-1], F, 0.5)
    with pytest.raises(ValueError):
        estimate_qtt(y, d, F, 1.5)


def test_estimate_serialises():
    y, d, F = second_stage_data()
    est = estimate_qtt(y, d, F, 0.5)
    back = json.loads(est.to_json())
    assert back["delta"] == pytest.approx(est.delta) and back["r"] == 2


def test_time_varying_constant_equals_scalar():
    y, d, F = second_stage_data(3)
    tv = estimate_qtt_time_varying(y, d, F, 0.5, "constant")
    assert tv.zeta[0] == pytest.approx(estimate_qtt(y, d, F, 0.5).delta, abs=1e-9)


def test_time_varying_recovers_decay_path():
    rng = np.random.default_rng(2)
    T, T0 = 60, 30
    F = rng.standard_normal((T, 2))
    d = treatment_indicator(T, T0)
    s = np.arange(1, T + 1) - T0
    g = np.where(d > 0, 0.5 + 2.0 / np.maximum(s, 1), 0.0)
    tv = estimate_qtt_time_varying(F @ [1.0, 1.0] + g, d, F, 0.5, "decay")
    assert np.allclose(tv.zeta, [0.5, 2.0], atol=1e-9)
    assert tv.effect(T0 + 2)[0] == pytest.approx(1.5)


def test_time_varying_warns_for_polynomials():
    y, d, F = second_stage_data()
    with pytest.warns(UserWarning, match="non-standard"):
        estimate_qtt_time_varying(y, d, F, 0.5, "linear")
    with pytest.raises(ValueError):
        estimate_qtt_time_varying(y, d, F, 0.5, "cubic")


def test_factor_interacted_exact_and_short_post_period():
    rng = np.random.default_rng(5)
    T = 40
    F = rng.standard_normal((T, 2))
    d = treatment_indicator(T, 20)
    y = F @ [1.0, -1.0] + d * (0.3 + F @ [0.5, 0.2])
    fi = estimate_qtt_factor_interacted(y, d, F, 0.5)
    assert fi.zeta0 == pytest.approx(0.3, abs=1e-9)
    assert np.allclose(fi.zeta1, [0.5, 0.2], atol=1e-9)
    assert fi.inference == "heuristic"
    with pytest.raises(ValueError, match="post-treatment"):
        estimate_qtt_factor_interacted(y, treatment_indicator(T, T - 2), F, 0.5)


def test_multi_unit_failure_is_isolated():
    y, d, F = second_stage_data()
    bad = np.full_like(y, np.nan)
    out = estimate_qtt_multi(np.vstack([y, y + F @ [1.0, -2.0]]), d, F, 0.5)
    assert out[1].delta == pytest.approx(out[0].delta, abs=1e-9)
    D = np.vstack([d, d])
    D[1] = np.ones_like(d)
    out = estimate_qtt_multi(np.vstack([y, y]), D, F, 0.5)
    assert isinstance(out[1], UnitFailure) and out[1].unit == 2
    with pytest.raises(ValueError):
        estimate_qtt_multi(np.vstack([y, bad]), d, F, 0.5)


def test_first_stage_and_exact_delta_on_noiseless_panel():
    panel, _, _ = rank_panel(N=20, T=30, r=2, delta=0.9)
    controls, treated = split_control_treated(panel)
    fit, sel = fit_first_stage(controls, 0.5, n_factors=2, opts={"restarts": 2})
    assert sel is None
    est = estimate_qtt(treated[0], panel.d, fit.factors, 0.5)
    assert est.delta == pytest.approx(0.9, abs=1e-7)
    with pytest.raises(ValueError):
        fit_first_stage(controls, 0.5, stage1="pca", n_factors=2)


def test_estimator_api():
    panel, _, _ = rank_panel(N=20, T=30, r=1, delta=-0.4)
    controls, treated = split_control_treated(panel)
    est = QttEstimator(n_factors=1, restarts=2).fit(controls.T, treated[0], panel.d)
    assert est.delta_ == pytest.approx(-0.4, abs=1e-7)
    path = est.predict()
    assert np.allclose(path[: panel.T0], treated[0, : panel.T0], atol=1e-7)
    assert est.get_params()["n_factors"] == 1
    sq = QttEstimator(stage1="isqr", n_factors=1, restarts=1).fit(controls.T, treated[0], panel.d)
    assert sq.estimate_.estimator == "SQTT"


def test_quantile_path_examples():
    assert np.array_equal(predict_quantile_path([0.0], np.ones((4, 1))), np.zeros(4))
    t = np.arange(1.0, 6.0)
    assert np.array_equal(predict_quantile_path([2.0], t), 2 * t)
    with pytest.raises(ValueError):
        predict_quantile_path([1.0, 2.0], np.ones((4, 1)))


def test_quadratic_family_on_linear_truth():
    rng = np.random.default_rng(8)
    T, T0 = 60, 30
    F = rng.standard_normal((T, 2))
    d = treatment_indicator(T, T0)
    s = np.arange(1, T + 1) - T0
    with pytest.warns(UserWarning):
        tv = estimate_qtt_time_varying(F @ [1.0, 2.0] + d * (0.5 + 0.1 * s), d, F, 0.5, "quadratic")
    assert np.allclose(tv.zeta, [0.5, 0.1, 0.0], atol=1e-9)


def test_zero_interaction_nests_scalar_effect():
    y, d, F = second_stage_data(9, T=400)
    fi = estimate_qtt_factor_interacted(y, d, F, 0.5)
    assert np.all(np.abs(fi.zeta1) < 0.3)
    assert fi.zeta0 == pytest.approx(estimate_qtt(y, d, F, 0.5).delta, abs=0.2)


def test_multi_nests_single_and_opposite_effects():
    rng = np.random.default_rng(6)
    F = rng.standard_normal((40, 2))
    d = treatment_indicator(40, 20)
    base = F @ [1.0, 0.5]
    one = estimate_qtt_multi(base + 0.7 * d, d, F, 0.5)
    assert one[0].delta == estimate_qtt(base + 0.7 * d, d, F, 0.5).delta
    two = estimate_qtt_multi(np.vstack([base + 0.7 * d, base - 0.7 * d]), d, F, 0.5)
    assert [e.delta for e in two] == pytest.approx([0.7, -0.7], abs=1e-9)
