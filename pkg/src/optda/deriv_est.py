"""Polynomial least-squares estimators of the observed derivatives H D^l u.

A degree-``j_max`` polynomial in ``s = i / k_hat`` is fitted to
``Y_0, ..., Y_{k_hat}`` and its l-th time derivative at t = 0 is returned.
The window ``k_hat`` and degree ``j_max`` are picked by minimising the error
budget ``g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, InsufficientDataError, NumericalError

MAX_DEGREE = 12


@dataclass(frozen=True)
class DerivCoefficients:
    l: int
    j_max: int
    k_hat: int
    c: np.ndarray
    C_M: float


@dataclass(frozen=True)
class DerivEstimate:
    l: int
    value: np.ndarray
    k_hat_used: int
    j_max_used: int


@dataclass(frozen=True)
class BudgetParams:
    """Inputs of the error budget that do not depend on (l, j_max, k_hat)."""

    h: float
    sigma_z: float
    d_o: int
    C0: float
    C_der: float
    norm_H: float = 1.0

    @classmethod
    def from_problem(cls, sys, setup) -> "BudgetParams":
        c = sys.constants
        return cls(h=setup.h, sigma_z=setup.sigma_z, d_o=setup.dim_obs,
                   C0=c.C0, C_der=c.C_der, norm_H=setup.H.norm)


def _gram(j_max: int, k_hat: int) -> tuple[np.ndarray, np.ndarray]:
    s = np.arange(k_hat + 1) / k_hat
    M = np.vander(s, j_max + 1, increasing=True).T  # rows s^j, with 0^0 = 1
    return M, M @ M.T


def coefficients(l: int, j_max: int, k_hat: int, h: float) -> DerivCoefficients:
    """Weights c with sum_i c_i Y_i estimating the l-th derivative at t = 0."""
    if l < 0 or j_max < l:
        raise ValueError(f"need 0 <= l <= j_max, got l={l}, j_max={j_max}")
    if j_max > MAX_DEGREE:
        raise ValueError(f"degree {j_max} above {MAX_DEGREE} is too ill-conditioned")
    if k_hat < max(j_max, 1):
        raise ValueError(f"k_hat={k_hat} must be at least max(j_max, 1)")
    M, G = _gram(j_max, k_hat)
    e = np.zeros(j_max + 1)
    e[l] = 1.0
    try:
        x = linalg.solve(G, e, assume_a="pos")
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"normal equations singular for j_max={j_max}, k_hat={k_hat}") from exc
    c = math.factorial(l) / (k_hat * h) ** l * (M.T @ x)
    return DerivCoefficients(l, j_max, k_hat, c, float(math.sqrt(k_hat * x[l])))


def error_budget(l: int, j_max: int, k_hat: float, p: BudgetParams) -> float:
    """g(l, j_max, k_hat): deterministic bias term plus noise term."""
    x = k_hat * p.h
    bias = p.C0 * p.norm_H * p.C_der ** (j_max + 1) / math.sqrt(j_max + 1.5) * x ** (j_max + 1 - l)
    noise = x ** (-l - 0.5) * p.sigma_z * math.sqrt(p.h) * math.sqrt(2 * p.d_o * math.log(p.d_o + 1))
    return bias + noise


def k_hat_min(l: int, j_max: int, p: BudgetParams) -> float:
    """Stationary point of k_hat -> g(l, j_max, k_hat) over the positive reals."""
    a = p.C0 * p.norm_H * p.C_der ** (j_max + 1) / math.sqrt(j_max + 1.5)
    b = p.sigma_z * math.sqrt(p.h) * math.sqrt(2 * p.d_o * math.log(p.d_o + 1))
    if b == 0.0:
        return 0.0
    if a == 0.0:
        return math.inf
    pw, q = j_max + 1 - l, l + 0.5
    return (b * q / (a * pw)) ** (1.0 / (j_max + 1.5)) / p.h


def k_hat_min_closed_form(l: int, j_max: int, p: BudgetParams) -> float:
    """Closed-form variant without the factor 2 inside the noise root."""
    num = p.sigma_z * math.sqrt(p.h) * math.sqrt(p.d_o * math.log(p.d_o + 1) * (j_max + 1.5)) * (l + 0.5)
    den = (j_max + 1 - l) * p.C0 * p.norm_H * p.C_der ** (j_max + 1)
    return (num / den) ** (1.0 / (j_max + 1.5)) / p.h


def select_window(l: int, j_max: int, k: int, p: BudgetParams) -> int:
    """k_hat in {2 j_max + 3, ..., k} minimising g (smallest on ties)."""
    lo = 2 * j_max + 3
    if k < lo:
        raise InsufficientDataError(f"k={k} below 2*j_max+3={lo}")
    km = k_hat_min(l, j_max, p)
    if km <= lo:
        return lo
    if km >= k:
        return k
    fl, ce = int(math.floor(km)), int(math.ceil(km))
    return fl if error_budget(l, j_max, fl, p) <= error_budget(l, j_max, ce, p) else ce


def select_degree(l: int, J_max_cap: int, k: int, p: BudgetParams) -> tuple[int, int]:
    """Return (j_max_opt, k_hat_opt) minimising C_M * g over j_max in [l, cap]."""
    if J_max_cap < l or J_max_cap > (k - 3) // 2:
        raise ConfigurationError(
            f"J_max cap {J_max_cap} outside [{l}, {(k - 3) // 2}] for l={l}, k={k}")
    best = None
    for j in range(l, J_max_cap + 1):
        kh = select_window(l, j, k, p)
        score = coefficients(l, j, kh, p.h).C_M * error_budget(l, j, kh, p)
        if best is None or score < best[0]:
            best = (score, j, kh)
    return best[1], best[2]


def estimate_derivative(Y, l: int, J_max_cap: int, p: BudgetParams) -> DerivEstimate:
    """Estimate H D^l u(t_0) from observations Y_0..Y_k (rows of ``Y``)."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    k = Y.shape[0] - 1
    j, kh = select_degree(l, J_max_cap, k, p)
    c = coefficients(l, j, kh, p.h).c
    return DerivEstimate(l, c @ Y[: kh + 1], kh, j)


def hilbert_limit(l: int, j_max: int) -> tuple[float, float]:
    """Entry (l, l) of the inverse Hilbert matrix of order j_max + 1, and its root.

    The root is the large-window limit of C_M.
    """
    if j_max < l or l < 0:
        raise ValueError("need 0 <= l <= j_max")
    if j_max > MAX_DEGREE:
        raise ValueError(f"Hilbert matrix of order {j_max + 1} is too ill-conditioned")
    entry = float(linalg.invhilbert(j_max + 1, exact=True)[l, l])
    return entry, math.sqrt(entry)
