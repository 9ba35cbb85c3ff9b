"""Quantile-regression building blocks and solvers against independent oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.optimize import linprog

from qttfactor.qr import (
    ConvergenceError,
    QrProblem,
    RankDeficientError,
    SmoothingSpec,
    check_loss,
    fit_qr,
    fit_sqr,
    kernel_K,
    kernel_k,
    kernel_k_prime,
    score_psi,
    smoothed_loss,
    solve_qr_batch,
    solve_sqr_batch,
    stationarity_gap,
)


def lp_quantreg(X, y, tau):
    """Primal LP: min tau 1'u + (1-tau) 1'v, X b + u - v = y."""
    n, p = X.shape
    c = np.concatenate([np.zeros(2 * p), tau * np.ones(n), (1 - tau) * np.ones(n)])
    A = np.hstack([X, -X, np.eye(n), -np.eye(n)])
    res = linprog(c, A_eq=A, b_eq=y, bounds=(0, None), method="highs")
    assert res.status == 0
    return res.x[:p] - res.x[p:2 * p], res.fun


def objective(X, y, b, tau):
    return float(check_loss(y - X @ b, tau).sum())


def order_stat_oracle(y, tau):
    """Exhaustive search over the sample points; smallest minimiser."""
    vals = [(float(check_loss(y - c, tau).sum()), c) for c in np.sort(y)]
    best = min(v for v, _ in vals)
    return min(c for v, c in vals if v <= best + 1e-12)


# --- check loss and score -------------------------------------------------


def test_check_loss_values():
    assert check_loss(2.0, 0.3) == pytest.approx(0.6)
    assert check_loss(-2.0, 0.3) == pytest.approx(1.4)
    assert check_loss(0.0, 0.3) == 0.0


def test_score_at_zero_is_tau():
    assert score_psi(0.0, 0.3) == 0.3
    assert score_psi(-1e-12, 0.3) == pytest.approx(-0.7)
    assert score_psi(1.0, 0.3) == 0.3


@given(st.floats(-1e3, 1e3), st.floats(0.01, 0.99), st.floats(0.01, 100))
def test_check_loss_homogeneous(u, tau, c):
    assert check_loss(c * u, tau) == pytest.approx(c * check_loss(u, tau), rel=1e-12, abs=1e-12)


# --- kernel -----------------------------------------------------------------


def test_kernel_integrates_to_one():
    val, _ = integrate.quad(kernel_k, -1, 1, epsabs=1e-13)
    assert abs(val - 1.0) < 1e-10


@pytest.mark.parametrize("j", range(1, 8))
def test_kernel_moments_vanish(j):
    val, _ = integrate.quad(lambda z: z ** j * kernel_k(z), -1, 1, epsabs=1e-13)
    assert abs(val) < 1e-8


def test_kernel_eighth_moment_nonzero():
    val, _ = integrate.quad(lambda z: z ** 8 * kernel_k(z), -1, 1)
    assert abs(val) > 1e-4


def test_kernel_support_and_symmetry():
    z = np.linspace(-1.5, 1.5, 301)
    assert np.all(kernel_k(z[np.abs(z) >= 1]) == 0)
    assert np.allclose(kernel_k(z), kernel_k(-z))


def test_integrated_kernel_matches_quadrature():
    for z in np.linspace(-1, 1, 21):
        val, _ = integrate.quad(kernel_k, -1, z, epsabs=1e-14)
        assert kernel_K(z) == pytest.approx(1.0 - val, abs=1e-12)
    assert kernel_K(-3.0) == 1.0 and kernel_K(3.0) == 0.0 and kernel_K(0.0) == 0.5


def test_kernel_derivative_finite_difference():
    z = np.linspace(-0.99, 0.99, 100)
    eps = 1e-6
    fd = (kernel_k(z + eps) - kernel_k(z - eps)) / (2 * eps)
    assert np.allclose(kernel_k_prime(z), fd, rtol=1e-6, atol=1e-7)


def test_smoothed_loss_derivatives_finite_difference(rng):
    u = rng.uniform(-1.5, 1.5, 100)
    tau, h, eps = 0.3, 0.5, 1e-6
    d1 = (smoothed_loss(u + eps, tau, h) - smoothed_loss(u - eps, tau, h)) / (2 * eps)
    assert np.allclose(smoothed_loss(u, tau, h, 1), d1, rtol=1e-6, atol=1e-8)
    d2 = (smoothed_loss(u + eps, tau, h, 1) - smoothed_loss(u - eps, tau, h, 1)) / (2 * eps)
    assert np.allclose(smoothed_loss(u, tau, h, 2), d2, rtol=1e-5, atol=1e-6)


def test_smoothed_loss_equals_check_loss_off_band(rng):
    u = np.concatenate([rng.uniform(0.5, 5, 50), -rng.uniform(0.5, 5, 50)])
    assert np.allclose(smoothed_loss(u, 0.7, 0.5), check_loss(u, 0.7))


def test_smoothing_spec_validation():
    with pytest.raises(ValueError):
        SmoothingSpec(bandwidth=0.0)
    with pytest.raises(ValueError):
        SmoothingSpec(kernel_order=6)


# --- exact QR ---------------------------------------------------------------


def test_intercept_only_small_example():
    b = fit_qr(QrProblem(np.ones((3, 1)), [1.0, 2.0, 3.0], 0.5))
    assert b[0] == 2.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=1, max_size=12),
       st.sampled_from([0.1, 0.25, 0.3, 0.5, 0.75, 0.9]))
def test_intercept_only_matches_exhaustive_oracle(vals, tau):
    y = np.asarray(vals, dtype=float)
    b = fit_qr(QrProblem(np.ones((y.size, 1)), y, tau))[0]
    assert b == order_stat_oracle(y, tau)


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.83])
def test_fit_qr_matches_linprog(rng, tau):
    for _ in range(10):
        n, p = 60, 4
        X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
        y = X @ rng.standard_normal(p) + rng.standard_t(3, n)
        b = fit_qr(QrProblem(X, y, tau))
        _, val = lp_quantreg(X, y, tau)
        assert objective(X, y, b, tau) == pytest.approx(val, rel=1e-10, abs=1e-10)
        assert stationarity_gap(X, y, b, tau).max() < 1e-6


def test_brute_force_grid_two_parameters(rng):
    n = 9
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = rng.standard_normal(n)
    b = fit_qr(QrProblem(X, y, 0.4))
    # the optimum is a vertex through two observations: enumerate them all
    best = np.inf
    for i, j in itertools.combinations(range(n), 2):
        A = X[[i, j]]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        best = min(best, objective(X, y, np.linalg.solve(A, y[[i, j]]), 0.4))
    assert objective(X, y, b, 0.4) == pytest.approx(best, abs=1e-12)


def test_weighted_problem_equals_scaled_rows(rng):
    n = 40
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = rng.standard_normal(n)
    w = rng.uniform(0.5, 2.0, n)
    b = fit_qr(QrProblem(X, y, 0.3, weights=w))
    _, val = lp_quantreg(X * w[:, None], y * w, 0.3)
    assert objective(X * w[:, None], y * w, b, 0.3) == pytest.approx(val, abs=1e-9)


def test_batch_matches_single(rng):
    n, p, B = 50, 3, 20
    X = rng.standard_normal((n, p))
    Y = rng.standard_normal((B, n))
    bb = solve_qr_batch(X, Y, 0.6)
    for k in range(B):
        _, val = lp_quantreg(X, Y[k], 0.6)
        assert objective(X, Y[k], bb[k], 0.6) == pytest.approx(val, abs=1e-9)


def test_batch_per_problem_designs(rng):
    B, n, p = 8, 30, 3
    X = rng.standard_normal((B, n, p))
    Y = rng.standard_normal((B, n))
    bb = solve_qr_batch(X, Y, 0.25)
    for k in range(B):
        _, val = lp_quantreg(X[k], Y[k], 0.25)
        assert objective(X[k], Y[k], bb[k], 0.25) == pytest.approx(val, abs=1e-9)


def test_warm_basis_reproduces_solution(rng):
    n, p, B = 80, 3, 10
    X = rng.standard_normal((n, p))
    Y = rng.standard_normal((B, n))
    b1, info = solve_qr_batch(X, Y, 0.5, return_info=True)
    Y2 = Y + 1e-3 * rng.standard_normal(Y.shape)
    b2 = solve_qr_batch(X, Y2, 0.5, basis0=info["basis"])
    for k in range(B):
        _, val = lp_quantreg(X, Y2[k], 0.5)
        assert objective(X, Y2[k], b2[k], 0.5) == pytest.approx(val, abs=1e-9)


def test_duplicate_rows_are_handled(rng):
    base = rng.standard_normal((15, 3))
    idx = rng.integers(0, 15, 40)
    X, y = base[idx], rng.standard_normal(15)[idx]
    b = fit_qr(QrProblem(X, y, 0.5))
    _, val = lp_quantreg(X, y, 0.5)
    assert objective(X, y, b, 0.5) == pytest.approx(val, abs=1e-9)


def test_rank_deficient_design_names_column(rng):
    x = rng.standard_normal(20)
    X = np.column_stack([np.ones(20), x, 2 * x])
    with pytest.raises(RankDeficientError) as exc:
        fit_qr(QrProblem(X, rng.standard_normal(20), 0.5))
    assert exc.value.column == 2


def test_problem_validation():
    with pytest.raises(ValueError):
        QrProblem(np.ones((3, 1)), [1, 2], 0.5)
    with pytest.raises(ValueError):
        QrProblem(np.ones((3, 1)), [1, 2, 3], 1.0)
    with pytest.raises(ValueError):
        QrProblem(np.ones((3, 1)), [1, np.nan, 3], 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.2, 0.5, 0.7]))
def test_equivariance(seed, tau):
    rng = np.random.default_rng(seed)
    n = 25
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = rng.standard_normal(n)
    b = fit_qr(QrProblem(X, y, tau))
    # shift by X g and positive scaling move the objective value exactly
    g = np.array([0.3, -1.1])
    b2 = fit_qr(QrProblem(X, 2.5 * y + X @ g, tau))
    assert objective(X, 2.5 * y + X @ g, b2, tau) == pytest.approx(
        2.5 * objective(X, y, b, tau), rel=1e-9, abs=1e-9)


# --- smoothed QR -----------------------------------------------------------


def test_sqr_gradient_vanishes(rng):
    n = 200
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = X @ [1.0, 2.0] + rng.standard_normal(n)
    b = fit_sqr(QrProblem(X, y, 0.3), 0.5)
    g = X.T @ smoothed_loss(y - X @ b, 0.3, 0.5, 1) / n
    assert np.abs(g).max() < 1e-8


def test_sqr_tends_to_qr_as_bandwidth_shrinks(rng):
    n = 400
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = X @ [1.0, 2.0] + rng.standard_normal(n)
    bq = fit_qr(QrProblem(X, y, 0.5))
    bs = fit_sqr(QrProblem(X, y, 0.5), 0.01)
    assert np.allclose(bq, bs, atol=0.02)


def test_sqr_batch_objective_not_above_start(rng):
    n, B = 60, 5
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    Y = rng.standard_normal((B, n))
    b0 = solve_qr_batch(X, Y, 0.5)
    b, ok, gn = solve_sqr_batch(X, Y, 0.5, 0.5, beta0=b0)
    assert ok.all()
    for k in range(B):
        f0 = smoothed_loss(Y[k] - X @ b0[k], 0.5, 0.5).sum()
        f1 = smoothed_loss(Y[k] - X @ b[k], 0.5, 0.5).sum()
        assert f1 <= f0 + 1e-12


def test_sqr_iteration_cap_raises(rng):
    n = 100
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = rng.standard_normal(n)
    with pytest.raises(ConvergenceError):
        fit_sqr(QrProblem(X, y, 0.5), 0.5, beta0=np.array([50.0, -50.0]), max_iter=1)


def test_sqr_rejects_bad_bandwidth(rng):
    with pytest.raises(ValueError):
        solve_sqr_batch(np.ones((5, 1)), np.ones((1, 5)), 0.5, 0.0)


# --- worked examples -------------------------------------------------------


@pytest.mark.parametrize("u,tau,val", [(0, 0.3, 0.0), (2, 0.5, 1.0), (-2, 0.25, 1.5)])
def test_check_loss_examples(u, tau, val):
    assert check_loss(u, tau) == pytest.approx(val)


@pytest.mark.parametrize("u,val", [(1, 0.5), (-1, -0.5)])
def test_score_examples(u, val):
    assert score_psi(u, 0.5) == val


def test_kernel_examples():
    assert kernel_k(0.0) == pytest.approx(24255 / 8192, rel=1e-15)
    assert kernel_K(-1.0) == 1.0 and kernel_K(1.0) == 0.0


def test_even_sample_median_takes_lower_endpoint():
    assert fit_qr(QrProblem(np.ones((4, 1)), [1.0, 2.0, 3.0, 4.0], 0.5))[0] == 2.0


def test_scale_equivariance_of_coefficients(rng):
    n = 30
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = rng.standard_normal(n)
    assert np.allclose(fit_qr(QrProblem(X, 3.0 * y, 0.4)), 3.0 * fit_qr(QrProblem(X, y, 0.4)))


def test_smoothed_intercept_matches_grid():
    y = np.array([1.0, 2.0, 3.0])
    b = fit_sqr(QrProblem(np.ones((3, 1)), y, 0.5), 0.5)[0]
    grid = np.linspace(0, 4, 40001)
    obj = [smoothed_loss(y - g, 0.5, 0.5).sum() for g in grid]
    assert abs(b - grid[int(np.argmin(obj))]) < 1e-3
    assert abs(b - 2.0) <= 0.05


def test_smoothed_fit_approaches_qr_monotonically(rng):
    n = 300
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = X @ [0.5, 1.0] + rng.standard_normal(n)
    bq = fit_qr(QrProblem(X, y, 0.5))
    gaps = [np.abs(fit_sqr(QrProblem(X, y, 0.5), h) - bq).max() for h in (0.5, 0.1, 0.02)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_smoothed_translation_equivariance(rng):
    n = 80
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = rng.standard_normal(n)
    b = fit_sqr(QrProblem(X, y, 0.3), 0.5)
    b2 = fit_sqr(QrProblem(X, y + 2.5, 0.3), 0.5)
    assert np.allclose(b2 - b, [2.5, 0.0], atol=1e-7)
