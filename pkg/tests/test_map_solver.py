import json

import jsonschema
import numpy as np
import pytest
from scipy import linalg

from optda import map_solver, oracle
from optda.dynamics import lorenz96
from optda.errors import OutOfBallError
from optda.map_solver import MatrixFreeHessian, SmoothConfig, SmoothingProblem, newton_solve, smooth
from optda.observation import ObservationSetup, generate, identity_operator, scenario_half_blocks

U0_12 = (13 + np.arange(12)) / 24.0


def _problem(sigma=1e-3, k=20, h=1e-2, seed=0, d=12):
    s = lorenz96(d)
    setup = ObservationSetup(scenario_half_blocks(d), sigma, h, k)
    u0 = (d + 1 + np.arange(d)) / (2 * d)
    return SmoothingProblem(s, setup, generate(s, setup, u0, seed)), u0


def test_objective_is_half_squared_residual():
    prob, u0 = _problem()
    r = prob.residuals(u0)
    assert prob.objective(u0) == pytest.approx(0.5 * prob.weight * np.sum(r * r))


@pytest.mark.parametrize("seed", range(3))
def test_adjoint_gradient_matches_fd(seed):
    prob, u0 = _problem(seed=seed)
    v = u0 + 0.01 * np.random.default_rng(seed).standard_normal(12)
    ga = map_solver.gradient(prob, v, "adjoint")
    gf = map_solver.gradient(prob, v, "fd")
    assert np.linalg.norm(ga - gf) <= 1e-5 * np.linalg.norm(ga)


def test_gradient_outside_ball():
    prob, _ = _problem()
    with pytest.raises(OutOfBallError):
        map_solver.gradient(prob, np.full(12, prob.sys.R))


def test_matrix_free_product_matches_dense():
    prob, u0 = _problem()
    v = u0 + 0.02
    Hd = map_solver.hessian_dense(prob, v)
    mf = MatrixFreeHessian(prob, v)
    rng = np.random.default_rng(0)
    for _ in range(3):
        w = rng.standard_normal(12)
        assert np.linalg.norm(mf(w) - Hd @ w) <= 1e-6 * np.linalg.norm(Hd @ w)
    assert np.allclose(Hd, Hd.T)


def test_gn_diagonal_probing_is_exact_for_small_d():
    prob, u0 = _problem()
    mf = MatrixFreeHessian(prob, u0)
    G = np.column_stack([mf.gauss_newton(e) for e in np.eye(12)])
    assert np.allclose(mf.gn_diagonal(), np.diag(G), rtol=1e-10)


def test_pcg_solves_spd_system():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((30, 30))
    A = M @ M.T + 30 * np.eye(30)
    b = rng.standard_normal(30)
    res = map_solver.pcg(lambda x: A @ x, b, precond=1 / np.diag(A), tol=1e-12)
    assert res.converged
    assert np.allclose(res.x, np.linalg.solve(A, b), atol=1e-9)


def test_newton_recovers_linear_least_squares():
    # flat prior and a linear map: the MAP is the least-squares solution
    A = np.array([[1.0, 0.3], [0.0, 2.0]])
    s = oracle.linear_system(A)
    setup = ObservationSetup(identity_operator(2), 1e-2, 0.1, 5)
    prob = SmoothingProblem(s, setup, generate(s, setup, np.array([0.8, -0.5]), 1))
    G = np.vstack([linalg.expm(-A * t) for t in setup.times()])
    want = np.linalg.lstsq(G, prob.Y.ravel(), rcond=None)[0]
    x, trace = newton_solve(prob, np.zeros(2), mode="dense")
    assert trace.converged
    assert np.allclose(x, want, atol=1e-10)


def test_noiseless_map_is_truth():
    prob, u0 = _problem(sigma=0.0)
    x, trace = newton_solve(prob, u0 + 0.05)
    assert trace.converged
    assert np.allclose(x, u0, atol=1e-10)


def test_dense_and_matrix_free_agree():
    prob, u0 = _problem()
    xd, td = newton_solve(prob, u0 + 0.03, mode="dense")
    xm, tm = newton_solve(prob, u0 + 0.03, mode="matfree")
    assert td.converged and tm.converged
    assert td.hessian_mode == "dense" and tm.hessian_mode == "matfree"
    assert np.allclose(xd, xm, atol=1e-9)


def test_newton_iterates_stay_in_ball():
    prob, u0 = _problem(sigma=1e-2)
    x, trace = newton_solve(prob, prob.sys.project(u0 + 5.0))
    for it in trace.iterates:
        assert prob.sys.in_ball(it)


def test_objective_decreases_along_newton():
    prob, u0 = _problem()
    _, trace = newton_solve(prob, u0 + 0.05)
    obj = np.array(trace.objective)
    assert np.all(np.diff(obj) <= 1e-12 * np.abs(obj[:-1]) + 1e-300)


def test_smooth_report_schema_and_rmse():
    prob, u0 = _problem(k=50)
    rep = smooth(prob, truth=u0)
    d = json.loads(rep.to_json())
    jsonschema.validate(d, map_solver.REPORT_SCHEMA)
    assert rep.converged and d["iterations"] <= 10
    assert rep.rmse_vs_truth < rep.rmse_x0 / 10
    assert np.allclose(rep.u_filter, map_solver.SmoothingProblem._fwd(prob, rep.u_map)[0][-1])


def test_max_iters_reports_non_convergence():
    prob, u0 = _problem()
    rep = smooth(prob, SmoothConfig(max_iters=1), x0=u0 + 0.5)
    assert not rep.converged
    assert rep.trace.message


def test_filter_stream_shapes_and_warmup():
    s = lorenz96(12)
    k, n = 10, 16
    setup = ObservationSetup(scenario_half_blocks(12), 1e-3, 1e-2, k)
    rec = generate(s, setup.with_k(n - 1), U0_12, 0)
    out = map_solver.filter_stream(s, setup, rec.Y, K_stride=3)
    assert out.estimates.shape == (n, 12)
    assert np.all(out.estimates[:k] == 0)
    assert list(np.nonzero(out.refreshed)[0]) == [10, 13]
    err = np.linalg.norm(out.estimates[k:] - rec.truth[k:], axis=1)
    assert np.all(err < 0.05)


def test_filter_rejects_bad_stride():
    s = lorenz96(12)
    setup = ObservationSetup(scenario_half_blocks(12), 1e-3, 1e-2, 5)
    with pytest.raises(ValueError):
        map_solver.filter_stream(s, setup, np.zeros((8, 6)), K_stride=0)
