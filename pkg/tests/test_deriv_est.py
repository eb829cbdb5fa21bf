import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import optimize

from optda import deriv_est
from optda.deriv_est import BudgetParams
from optda.dynamics import lorenz96
from optda.errors import ConfigurationError, InsufficientDataError
from optda.harness.selftest import load_table
from optda.observation import ObservationSetup, identity_operator, trajectory


def _params(sigma=1e-3, h=1e-2, d_o=6):
    c = lorenz96(12).constants
    return BudgetParams(h=h, sigma_z=sigma, d_o=d_o, C0=c.C0, C_der=c.C_der)


@pytest.mark.parametrize("entry", load_table()["entries"], ids=lambda e: f"l{e['l']}j{e['j_max']}k{e['k_hat']}")
def test_coefficients_match_exact_rationals(entry):
    want = np.array([float(Fraction(x)) for x in entry["c"]])
    got = deriv_est.coefficients(entry["l"], entry["j_max"], entry["k_hat"], entry["h"]).c
    assert np.allclose(got, want, rtol=1e-10, atol=1e-10 * np.abs(want).max())


@pytest.mark.parametrize("l,j,kh", [(0, 0, 3), (0, 2, 7), (1, 1, 5), (1, 3, 15), (2, 4, 20), (3, 5, 25)])
def test_exact_on_polynomials(l, j, kh):
    rng = np.random.default_rng(l + 10 * j)
    h = 1e-2
    a = rng.standard_normal(j + 1)
    y = np.polyval(a[::-1], np.arange(kh + 1) * h)
    c = deriv_est.coefficients(l, j, kh, h).c
    err = abs(c @ y - math.factorial(l) * a[l])
    assert err <= 1e-9 * np.abs(c).sum() * np.abs(y).max()


def test_coefficients_scale_with_h():
    c1 = deriv_est.coefficients(2, 3, 9, 1.0).c
    c2 = deriv_est.coefficients(2, 3, 9, 0.1).c
    assert np.allclose(c2, c1 / 0.01)


def test_C_M_matches_definition():
    l, j, kh = 1, 2, 12
    s = np.arange(kh + 1) / kh
    M = np.vander(s, j + 1, increasing=True).T
    x = np.linalg.solve(M @ M.T, np.eye(j + 1)[l])
    assert deriv_est.coefficients(l, j, kh, 1.0).C_M == pytest.approx(math.sqrt(kh * x[l]))


@pytest.mark.parametrize("l,j", [(0, 0), (1, 1), (1, 3), (2, 4)])
def test_C_M_tends_to_hilbert_limit(l, j):
    _, root = deriv_est.hilbert_limit(l, j)
    prev = None
    for kh in (100, 1000, 10000):
        gap = abs(deriv_est.coefficients(l, j, kh, 1.0).C_M - root)
        if prev is not None:
            assert gap < prev
        prev = gap
    assert prev / root < 5e-3


def test_hilbert_limit_value():
    entry, root = deriv_est.hilbert_limit(1, 1)
    assert entry == pytest.approx(12.0)
    assert root == pytest.approx(math.sqrt(12.0))


@pytest.mark.parametrize("sigma", [1e-6, 1e-3, 1e-1])
@pytest.mark.parametrize("l,j", [(0, 1), (1, 1), (1, 3), (2, 2)])
def test_k_hat_min_is_stationary_point(sigma, l, j):
    p = _params(sigma)
    km = deriv_est.k_hat_min(l, j, p)
    res = optimize.minimize_scalar(lambda x: deriv_est.error_budget(l, j, math.exp(x), p),
                                   bracket=(math.log(km) - 1, math.log(km) + 1), tol=1e-12)
    assert math.exp(res.x) == pytest.approx(km, rel=1e-5)


def test_closed_form_variant_differs_by_root_two():
    p = _params()
    for l, j in [(0, 1), (1, 2), (2, 3)]:
        ratio = deriv_est.k_hat_min(l, j, p) / deriv_est.k_hat_min_closed_form(l, j, p)
        assert ratio == pytest.approx(2 ** (0.5 / (j + 1.5)), rel=1e-12)


@pytest.mark.parametrize("sigma,k", [(1e-3, 50), (1e-6, 40), (1e-1, 200), (0.0, 30)])
@pytest.mark.parametrize("l,j", [(0, 1), (1, 1), (1, 2), (2, 3)])
def test_select_window_brute_force(sigma, k, l, j):
    p = _params(sigma)
    got = deriv_est.select_window(l, j, k, p)
    want = min(range(2 * j + 3, k + 1), key=lambda kh: deriv_est.error_budget(l, j, kh, p))
    assert got == want


@pytest.mark.parametrize("sigma", [1e-8, 1e-3, 1e-1])
@pytest.mark.parametrize("l", [0, 1, 2])
def test_select_degree_brute_force(sigma, l):
    p = _params(sigma)
    k, cap = 60, 5
    j, kh = deriv_est.select_degree(l, cap, k, p)
    scores = {}
    for jj in range(l, cap + 1):
        w = deriv_est.select_window(l, jj, k, p)
        scores[jj] = deriv_est.coefficients(l, jj, w, p.h).C_M * deriv_est.error_budget(l, jj, w, p)
    assert j == min(scores, key=scores.get)
    assert kh == deriv_est.select_window(l, j, k, p)


def test_selection_errors():
    p = _params()
    with pytest.raises(InsufficientDataError):
        deriv_est.select_window(1, 3, 8, p)
    with pytest.raises(ConfigurationError):
        deriv_est.select_degree(2, 1, 50, p)
    with pytest.raises(ConfigurationError):
        deriv_est.select_degree(1, 30, 20, p)
    with pytest.raises(ValueError):
        deriv_est.coefficients(3, 2, 10, 1.0)


def test_estimates_lorenz96_derivatives():
    s = lorenz96(12)
    u = np.linspace(0.5, 1.0, 12)
    h, k = 1e-4, 40
    setup = ObservationSetup(identity_operator(12), 0.0, h, k)
    X = trajectory(s, setup, u)
    p = BudgetParams.from_problem(s, setup)
    est0 = deriv_est.estimate_derivative(X, 0, 4, p)
    est1 = deriv_est.estimate_derivative(X, 1, 4, p)
    assert np.allclose(est0.value, u, atol=1e-9)
    assert np.allclose(est1.value, s.rhs(u), atol=1e-5)


def test_estimator_noise_variance():
    # Var(c'Z) = sigma^2 ||c||^2
    rng = np.random.default_rng(0)
    c = deriv_est.coefficients(1, 2, 15, 0.01).c
    Z = 0.1 * rng.standard_normal((20000, 16))
    assert np.var(Z @ c) == pytest.approx(0.01 * c @ c, rel=0.05)
