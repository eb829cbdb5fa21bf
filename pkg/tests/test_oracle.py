"""Grid posterior against closed-form Gaussian posteriors of linear models."""

import numpy as np
import pytest
from scipy import linalg

from optda import oracle
from optda.errors import GridTooSmallError, InvalidDimensionError
from optda.gaussian_approx import GaussianApprox, Kind
from optda.map_solver import SmoothingProblem
from optda.observation import ObservationSetup, generate, identity_operator, ObservationOperator


def _linear_problem(sigma=1e-2, h=0.1, k=5, seed=1, H=None):
    A = np.array([[1.0, 0.3], [0.0, 2.0]])
    s = oracle.linear_system(A)
    H = identity_operator(2) if H is None else H
    setup = ObservationSetup(H, sigma, h, k)
    u0 = np.array([0.8, -0.5])
    return s, setup, u0, SmoothingProblem(s, setup, generate(s, setup, u0, seed)), A


def _closed_form(setup, Y, A):
    # Y_i = H e^{-A t_i} u + Z_i with a flat prior
    Hd = setup.H.dense()
    G = np.vstack([Hd @ linalg.expm(-A * t) for t in setup.times()])
    P = G.T @ G
    mean = np.linalg.solve(P, G.T @ Y.ravel())
    return mean, setup.sigma_z ** 2 * np.linalg.inv(P)


def test_grid_matches_conjugate_posterior():
    s, setup, u0, prob, A = _linear_problem()
    spec, _ = oracle.auto_grid(prob, u0, n=121)
    gp = oracle.grid_posterior(prob, spec)
    mean, cov = _closed_form(setup, prob.Y, A)
    assert np.allclose(gp.mean, mean, atol=1e-6 * np.sqrt(np.diag(cov)).max() + 1e-10)
    assert np.allclose(gp.covariance, cov, rtol=1e-3)
    assert gp.edge_mass < oracle.EDGE_MASS_TOL
    assert gp.integrate(gp.density) == pytest.approx(1.0, abs=1e-12)


def test_grid_partial_observation():
    H = ObservationOperator(2, index=np.array([0]))
    s, setup, u0, prob, A = _linear_problem(H=H, k=8)
    spec, _ = oracle.auto_grid(prob, u0, n=121)
    gp = oracle.grid_posterior(prob, spec)
    mean, cov = _closed_form(setup, prob.Y, A)
    assert np.allclose(gp.mean, mean, atol=1e-4 * np.sqrt(np.diag(cov)).max())


def test_tv_of_exact_gaussian_is_zero():
    s, setup, u0, prob, A = _linear_problem()
    spec, _ = oracle.auto_grid(prob, u0, n=101)
    gp = oracle.grid_posterior(prob, spec)
    mean, cov = _closed_form(setup, prob.Y, A)
    q = GaussianApprox(mean, setup.sigma_z ** 2 * np.linalg.inv(cov), setup.sigma_z, Kind.SMOOTHER_THEORY)
    assert oracle.tv_distance(gp, q) < 1e-6
    assert oracle.w1_distance_mc(gp, q, 2000) < 1e-6


def test_tv_detects_shift():
    s, setup, u0, prob, A = _linear_problem()
    spec, _ = oracle.auto_grid(prob, u0, n=101)
    gp = oracle.grid_posterior(prob, spec)
    mean, cov = _closed_form(setup, prob.Y, A)
    P = setup.sigma_z ** 2 * np.linalg.inv(cov)
    q = GaussianApprox(mean + 2 * np.sqrt(np.diag(cov)), P, setup.sigma_z, Kind.SMOOTHER_THEORY)
    assert oracle.tv_distance(gp, q) > 0.3


def test_importance_mean_agrees_with_grid():
    s, setup, u0, prob, A = _linear_problem()
    spec, _ = oracle.auto_grid(prob, u0, n=101)
    gp = oracle.grid_posterior(prob, spec)
    mean, cov = _closed_form(setup, prob.Y, A)
    q = GaussianApprox(mean, 0.5 * setup.sigma_z ** 2 * np.linalg.inv(cov), setup.sigma_z, Kind.SMOOTHER_THEORY)
    m, ess = oracle.importance_mean(prob, q, 20000, seed=2)
    assert ess > 1000
    assert np.all(np.abs(m - gp.mean) < 5 * np.sqrt(np.diag(cov)) / np.sqrt(ess))


def test_grid_too_small_raises():
    s, setup, u0, prob, A = _linear_problem()
    spec, _ = oracle.auto_grid(prob, u0, n=41, width=1.0)
    with pytest.raises(GridTooSmallError):
        oracle.grid_posterior(prob, spec)


def test_grid_dimension_limit():
    from optda.dynamics import lorenz96
    s = lorenz96(6)
    setup = ObservationSetup(identity_operator(6), 1e-2, 1e-2, 3)
    prob = SmoothingProblem(s, setup, generate(s, setup, np.ones(6), 0))
    with pytest.raises(InvalidDimensionError):
        oracle.grid_posterior(prob, oracle.GridSpec(np.ones(6), np.ones(6), 3))


def test_toy2d_conserves_energy():
    s = oracle.toy2d(a=1.3)
    rng = np.random.default_rng(0)
    for _ in range(10):
        v = rng.standard_normal(2)
        assert abs(s.B(v, v) @ v) < 1e-14 * np.linalg.norm(v) ** 3
    v = np.array([0.7, -0.2])
    # du1/dt = -u1 - a u1 u2 + f1 and du2/dt = -u2 + a u1^2 + f2
    expect = np.array([-0.7 + 1.3 * 0.7 * 0.2 + 2.0, 0.2 + 1.3 * 0.49 + 1.0])
    assert np.allclose(s.rhs(v), expect, atol=1e-14)


def test_mse_ratio_linear_model_is_one():
    A = np.array([[1.0, 0.3], [0.0, 2.0]])
    s = oracle.linear_system(A)
    setup = ObservationSetup(identity_operator(2), 1e-2, 0.1, 5)
    truth = np.array([0.8, -0.5])

    def factory(seed):
        return SmoothingProblem(s, setup, generate(s, setup, truth, seed))

    res = oracle.mse_ratio(factory, truth, range(10), n=61)
    # posterior mean and MAP coincide for a Gaussian posterior
    assert res.ratio == pytest.approx(1.0, abs=1e-6)
