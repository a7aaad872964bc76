import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from panelq.panel import PanelData, check_loss
from panelq.path import extract_groups
from panelq.solver import (CONVERGED, MAX_ITERATIONS, NUMERICAL_FAILURE, QrProblem,
                           SolverSettings, build_fe_problem, build_grouped_problem,
                           build_penalized_problem, build_penalty_graph, kkt_violation,
                           penalty_scale, solve_fe, solve_penalized, solve_weighted_qr)

from conftest import make_panel


def intercept_problem(y, tau):
    y = np.asarray(y, dtype=float)
    return QrProblem(sp.csr_matrix(np.ones((y.size, 1))), y, tau, 1.0)


@pytest.mark.parametrize("y, tau, expected", [
    ([1.0, 2.0, 3.0], 0.5, 2.0),
    ([1.0, 2.0, 3.0, 4.0, 5.0], 0.25, 2.0),
    ([5.0, -1.0, 3.0, 8.0, 0.0, 2.0, 7.0], 0.8, 7.0),
])
def test_intercept_only_quantiles(y, tau, expected):
    rep = solve_weighted_qr(intercept_problem(y, tau))
    assert rep.status == CONVERGED
    assert rep.solution[0] == pytest.approx(expected, abs=1e-7)


def brute_force_line(x, y, tau):
    """Best of all lines through two data points (a QR optimum interpolates p+1 points)."""
    best = np.inf
    for i, j in itertools.combinations(range(x.size), 2):
        if x[i] == x[j]:
            continue
        slope = (y[j] - y[i]) / (x[j] - x[i])
        icpt = y[i] - slope * x[i]
        best = min(best, float(np.sum(check_loss(y - icpt - slope * x, tau))))
    return best


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("tau", [0.5, 0.3])
def test_simple_regression_matches_line_enumeration(seed, tau):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=5)
    y = 1.0 + 2.0 * x + rng.standard_t(3, size=5)
    design = sp.csr_matrix(np.column_stack([np.ones(5), x]))
    rep = solve_weighted_qr(QrProblem(design, y, tau, 1.0))
    assert rep.converged
    best = brute_force_line(x, y, tau)
    # the certificate bounds the gap by 1e-8 * (1 + objective)
    assert abs(rep.primal_objective - best) <= 1e-8 * (1 + best)


def test_fe_without_covariates_gives_individual_quantiles():
    rng = np.random.default_rng(3)
    n, t, tau = 6, 7, 0.3
    ids = np.repeat(np.arange(n), t)
    y = rng.normal(size=n * t) + np.repeat(np.arange(n), t)
    data = PanelData(y=y, x=None, ids=ids)
    fit = solve_fe(data, tau)
    # t * tau = 2.1, so the quantile is the unique third order statistic
    expected = [np.sort(y[ids == i])[2] for i in range(n)]
    np.testing.assert_allclose(fit.alpha, expected, atol=1e-7)
    assert fit.beta.size == 0


def test_single_individual_is_ordinary_regression(rng):
    data = make_panel(rng, 1, 40, p=2)
    fit = solve_fe(data, 0.4)
    design = sp.csr_matrix(np.column_stack([np.ones(40), data.x]))
    rep = solve_weighted_qr(QrProblem(design, data.y, 0.4, 1.0))
    np.testing.assert_allclose(np.r_[fit.alpha, fit.beta], rep.solution, atol=1e-7)


def test_fe_error_shrinks_with_t():
    errs = {}
    for t in (50, 200):
        worst = []
        for seed in range(6):
            rng = np.random.default_rng(100 + seed)
            alpha = np.array([1.0, 2.0, 3.0])
            data = make_panel(rng, 3, t, effects=alpha)
            worst.append(np.max(np.abs(solve_fe(data, 0.5).alpha - alpha)))
        errs[t] = np.mean(worst)
    # sqrt(200 / 50) = 2, so the error should roughly halve
    assert 0.3 < errs[200] / errs[50] < 0.75


def _certified(rep, tol=1e-8):
    return rep.converged and rep.duality_gap <= tol and rep.dual_infeasibility <= tol


def test_report_certificates_and_objective(rng):
    data = make_panel(rng, 8, 12, p=2)
    fe = solve_fe(data, 0.5)
    problem = build_penalized_problem(data, 0.5, build_penalty_graph(fe, 0.5))
    rep = solve_weighted_qr(problem)
    assert _certified(rep)
    w, tau = problem.weight, problem.tau
    r = problem.response - problem.design @ rep.solution
    recomputed = float(np.sum(w * r * (tau - (r < 0))))
    assert rep.primal_objective == pytest.approx(recomputed, rel=1e-8)
    assert abs(rep.primal_objective - rep.dual_objective) / (1 + abs(rep.primal_objective)) <= 1e-8
    # dual variables lie in w * [tau - 1, tau]
    d = rep.dual / w
    assert np.all(d >= tau - 1 - 1e-8) and np.all(d <= tau + 1e-8)
    assert kkt_violation(problem, rep, zero_tol=1e-6) <= 1e-6


panel_params = st.tuples(st.integers(1, 5), st.integers(3, 12), st.integers(0, 2),
                         st.integers(0, 2 ** 32 - 1))


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(panel_params, st.floats(-50, 50), st.sampled_from([0.25, 0.5, 0.8]))
def test_fe_shift_equivariance(params, shift, tau):
    n, t, p, seed = params
    data = make_panel(np.random.default_rng(seed), n, t, p=p)
    base = solve_fe(data, tau)
    moved = solve_fe(PanelData(data.y + shift, data.x, data.ids), tau)
    assert base.converged and moved.converged
    assert moved.objective == pytest.approx(base.objective, rel=1e-7, abs=1e-7)
    # unique solutions move exactly; objective equality covers degenerate faces
    if _unique(data, base, tau):
        np.testing.assert_allclose(moved.alpha, base.alpha + shift, atol=1e-6)
        np.testing.assert_allclose(moved.beta, base.beta, atol=1e-6)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(panel_params, st.floats(0.01, 100), st.sampled_from([0.25, 0.5, 0.8]))
def test_fe_scale_equivariance(params, scale, tau):
    n, t, p, seed = params
    data = make_panel(np.random.default_rng(seed), n, t, p=p)
    base = solve_fe(data, tau)
    scaled = solve_fe(PanelData(data.y * scale, data.x, data.ids), tau)
    assert scaled.objective == pytest.approx(scale * base.objective, rel=1e-7, abs=1e-9)
    if _unique(data, base, tau):
        coef = np.r_[base.alpha, base.beta]
        np.testing.assert_allclose(np.r_[scaled.alpha, scaled.beta], scale * coef,
                                   rtol=1e-6, atol=1e-6 * scale * (1 + np.abs(coef).max()))


def _unique(data, fit, tau):
    """Strict complementarity: exactly dim zero residuals and interior duals."""
    rep = fit.report
    r = data.residuals(fit.alpha, fit.beta)
    zero = np.abs(r) < 1e-7
    d = rep.dual[zero]
    return zero.sum() == data.n + data.p and np.all((d > tau - 1 + 1e-6) & (d < tau - 1e-6))


def test_problem_validation():
    design = sp.csr_matrix(np.ones((3, 1)))
    with pytest.raises(ValueError):
        QrProblem(design, np.zeros(2), 0.5, 1.0)
    with pytest.raises(ValueError):
        QrProblem(design, np.zeros(3), 0.5, [1.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        QrProblem(design, np.zeros(3), 1.0, 1.0)
    with pytest.raises(ValueError):
        QrProblem(design, np.zeros(3), [0.5, -0.1, 0.5], 1.0)


def test_iteration_limit_returns_best_iterate(rng):
    data = make_panel(rng, 10, 20, p=2)
    rep = solve_weighted_qr(build_fe_problem(data, 0.5), SolverSettings(max_iter=1))
    assert rep.status == MAX_ITERATIONS
    assert np.all(np.isfinite(rep.solution)) and rep.duality_gap > 1e-8


def test_too_few_rows_is_reported():
    design = sp.csr_matrix(np.array([[1.0, 0.0]]))
    rep = solve_weighted_qr(QrProblem(design, [1.0], 0.5, 1.0))
    assert rep.status == NUMERICAL_FAILURE


def test_sparse_path_matches_dense(rng):
    data = make_panel(rng, 12, 10, p=1)
    fe = solve_fe(data, 0.5)
    problem = build_penalized_problem(data, 0.5, build_penalty_graph(fe, 0.3))
    dense = solve_weighted_qr(problem)
    sparse = solve_weighted_qr(problem, SolverSettings(dense_max_dim=0))
    assert dense.converged and sparse.converged
    assert sparse.primal_objective == pytest.approx(dense.primal_objective, rel=1e-7)


# -- penalty graph and penalized problems ----------------------------------------------

def test_penalty_graph_formula():
    graph = build_penalty_graph(np.array([0.0, 1.0, 3.0]), 1.0)
    assert graph.as_dict() == pytest.approx({(0, 1): 1.0, (0, 2): 1 / 9, (1, 2): 1 / 4})


def test_penalty_graph_empty_and_capped():
    assert len(build_penalty_graph(np.array([0.0, 1.0]), 0.0)) == 0
    graph = build_penalty_graph(np.array([2.0, 2.0, 5.0]), 0.5, cap=1e8)
    assert graph.as_dict()[(0, 1)] == pytest.approx(0.5e8)
    assert np.all(np.isfinite(graph.weight))


def test_penalty_graph_rejects_negative_lambda():
    with pytest.raises(ValueError):
        build_penalty_graph(np.array([0.0, 1.0]), -1.0)


def test_penalty_rows_encode_absolute_differences(rng):
    data = make_panel(rng, 4, 3, p=1)
    alpha_check = rng.normal(size=4)
    graph = build_penalty_graph(alpha_check, 0.7)
    problem = build_penalized_problem(data, 0.3, graph)
    assert problem.n_rows == data.n_obs + 6
    coef = rng.normal(size=problem.dim)
    expected = (np.sum(check_loss(data.residuals(coef[:4], coef[4:]), 0.3))
                + graph.penalty(coef[:4]))
    assert problem.objective(coef) == pytest.approx(expected, rel=1e-12)


def test_empty_graph_reproduces_fe(rng):
    data = make_panel(rng, 5, 8)
    fe = solve_fe(data, 0.5)
    pen = solve_penalized(data, 0.5, 0.0, fe)
    np.testing.assert_allclose(np.r_[pen.alpha, pen.beta], np.r_[fe.alpha, fe.beta], atol=1e-6)
    assert pen.report.primal_objective == pytest.approx(fe.objective, rel=1e-6)


def test_huge_penalty_pools_two_individuals():
    y = np.array([0.3, 1.7, -0.4, 2.2, 0.9, 1.1])
    data = PanelData(y=y, x=None, ids=[0, 0, 0, 1, 1, 1])
    fe = solve_fe(data, 0.5)
    pen = solve_penalized(data, 0.5, 1e4, fe)
    assert pen.report.converged
    lo, hi = np.sort(y)[2:4]
    # both intercepts fuse onto a pooled median
    assert abs(pen.alpha[0] - pen.alpha[1]) < 1e-6
    assert lo - 1e-6 <= pen.alpha[0] <= hi + 1e-6


def exact_objective(y, ids, n, tau, lam_tilde, alpha_check, alpha):
    """Normalized objective: mean check loss plus the adaptive pair penalty over i != j."""
    loss = np.mean(check_loss(y - alpha[ids], tau))
    pen = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                diff = (alpha_check[i] - alpha_check[j]) ** 2
                weight = min(1 / diff, 1e8) if diff > 0 else 1e8
                pen += weight * abs(alpha[i] - alpha[j])
    return loss + lam_tilde / (n * (n - 1)) * pen


def test_two_individuals_match_grid_search():
    y = np.array([0.0, 1.0, 0.6, 2.0])
    ids = np.array([0, 0, 1, 1])
    data = PanelData(y=y, x=None, ids=ids)
    fe = solve_fe(data, 0.5)
    lam = 0.3
    pen = solve_penalized(data, 0.5, lam, fe)
    grid = np.round(np.arange(y.min(), y.max() + 5e-4, 1e-3), 6)
    a1, a2 = np.meshgrid(grid, grid, indexing="ij")
    loss = (0.25 * sum(check_loss(y[k] - np.where(ids[k] == 0, a1, a2), 0.5) for k in range(4)))
    d2 = (fe.alpha[0] - fe.alpha[1]) ** 2
    values = loss + lam / 2 * 2 * np.abs(a1 - a2) / d2
    ours = exact_objective(y, ids, 2, 0.5, lam, fe.alpha, pen.alpha)
    assert ours == pytest.approx(values.min(), abs=1e-3)
    assert ours <= values.min() + 1e-9
    assert pen.report.primal_objective / data.n_obs == pytest.approx(ours, rel=1e-8)


def test_penalty_scale_normalization():
    data = PanelData(y=np.zeros(12), x=None, ids=np.repeat(np.arange(4), 3))
    # 2 * N * lam / (n (n - 1)) per unordered pair
    assert penalty_scale(data, 0.6) == pytest.approx(2 * 12 * 0.6 / 12)


def test_penalized_rejects_mismatched_level(rng):
    data = make_panel(rng, 3, 5)
    fe = solve_fe(data, 0.25)
    with pytest.raises(ValueError):
        solve_penalized(data, 0.5, 0.1, fe)


def test_group_count_shrinks_from_zero_to_grid_max():
    from panelq.montecarlo import SimConfig, generate_panel
    for dgp, model in [(1, "location"), (2, "location-scale")]:
        cfg = SimConfig(dgp=dgp, model=model, n=15, t=20, seed=5)
        sim = generate_panel(cfg, 0)
        fe = solve_fe(sim.data, 0.5)
        k0 = extract_groups(solve_penalized(sim.data, 0.5, 0.0, fe).alpha).k
        k1 = extract_groups(solve_penalized(sim.data, 0.5, 0.35, fe).alpha).k
        assert k1 <= k0


def test_grouped_problem_collapses_columns(rng):
    data = make_panel(rng, 4, 5)
    problem = build_grouped_problem(data, 0.5, [0, 1, 1, 0], 2)
    assert problem.dim == 3
    with pytest.raises(ValueError):
        build_grouped_problem(data, 0.5, [0, 1, 2, 0], 2)
