"""Initial points for Newton's method built from estimated derivatives.

Two Lorenz 96 reconstructions invert the vector field coordinate by
coordinate; a generic least-squares inversion covers other systems; the
multi-anchor variant reconstructs at several early times and pulls each
candidate back with the backward Taylor series.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from . import _kernels as K
from . import deriv_est, dynamics
from .dynamics import BilinearSystem
from .errors import (
    DegenerateInputError,
    InitializationFailure,
    InsufficientDataError,
    InvalidDimensionError,
    OptimizationFailure,
)
from .observation import ObservationOperator, ObservationSetup, rng_for

DIVISOR_FLOOR = 1e-6  # relative to R
DEFAULT_STARTS = 16


class Scenario(str, enum.Enum):
    HALF_BLOCKS = "half_blocks"
    FIRST3 = "first3"
    GENERIC = "generic"


@dataclass(frozen=True)
class ReconstructionPlan:
    scenario: Scenario
    j: int
    anchors: tuple[int, ...] = (0,)
    caps: tuple[int, ...] | None = None

    def cap(self, l: int, k: int) -> int:
        c = self.caps[l] if self.caps is not None and l < len(self.caps) else max(l, 1)
        return max(l, min(c, (k - 3) // 2))


def first3_depth(d: int) -> int:
    return math.ceil((d - 3) / 3)


def default_anchors(k: int, h: float, sys: BilinearSystem) -> tuple[int, ...]:
    limit = dynamics.BACKWARD_FRACTION * sys.constants.max_step
    cand = sorted({0, k // 4, k // 2})
    return tuple(i for i in cand if i * h < limit)


def make_plan(H: ObservationOperator, sys: BilinearSystem, k: int, h: float,
              j: int | None = None, anchors: Sequence[int] | None = None,
              caps: Sequence[int] | None = None) -> ReconstructionPlan:
    """Pick the reconstruction matching the observation operator."""
    if H.name == "half_blocks":
        sc, jj = Scenario.HALF_BLOCKS, 1
    elif H.name == "first3":
        sc, jj = Scenario.FIRST3, first3_depth(sys.dim)
    else:
        sc, jj = Scenario.GENERIC, 1 if j is None else j
    if j is not None and j != jj:
        raise ValueError(f"scenario {sc.value} fixes j={jj}")
    anchors = default_anchors(k, h, sys) if anchors is None else tuple(sorted(set(anchors)))
    limit = dynamics.BACKWARD_FRACTION * sys.constants.max_step
    if 0 not in anchors:
        anchors = (0,) + anchors
    if any(a * h >= limit for a in anchors):
        raise ValueError("anchor times must stay below 0.9 / C_der")
    return ReconstructionPlan(sc, jj, tuple(anchors), None if caps is None else tuple(caps))


def _forcing(sys_or_f, d: int) -> np.ndarray:
    if isinstance(sys_or_f, BilinearSystem):
        return sys_or_f.f
    return np.broadcast_to(np.asarray(sys_or_f, dtype=float), (d,))


def _div(num: float, den: float, floor: float, idx: int) -> float:
    if abs(den) < floor:
        raise DegenerateInputError(f"divisor u[{idx}] = {den:.3g} below floor {floor:.3g}")
    return num / den


def reconstruct_halfblocks(x0, x1, f, R: float, floor: float | None = None) -> np.ndarray:
    """Full Lorenz 96 state from observed half blocks and their first derivatives.

    ``x0`` and ``x1`` are H u and H D u for the half-block operator (block order).
    """
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    d = 2 * x0.size
    if d % 6 or x1.shape != x0.shape:
        raise InvalidDimensionError("half-block inputs need 3 values per 6 coordinates")
    fv = _forcing(f, d)
    floor = DIVISOR_FLOOR * R if floor is None else floor
    u = np.full(d, np.nan)
    du = np.full(d, np.nan)
    obs = np.array([6 * b + r for b in range(d // 6) for r in range(3)])
    u[obs] = x0
    du[obs] = x1
    for b in range(0, d, 6):
        i = (b + 3) % d
        u[i] = _div(du[b + 2] - fv[b + 1] + u[b + 2] + u[b + 1] * u[b], u[b + 1], floor, b + 1)
        i = (b - 1) % d
        u[i] = _div(fv[b] - du[b + 1] - u[b + 1] + u[b] * u[b + 2], u[b], floor, b)
    for b in range(0, d, 6):
        i, i1 = (b - 2) % d, (b - 1) % d
        u[i] = _div(fv[i1] - du[b] - u[b] + u[i1] * u[b + 1], u[i1], floor, i1)
    return u


def _binom_sum(Dx: list, Dy: list, m: int, upto: int) -> float:
    return sum(math.comb(m, l) * Dx[l] * Dy[m - l] for l in range(upto + 1))


def reconstruct_first3(derivs, f, R: float, floor: float | None = None, d: int | None = None) -> np.ndarray:
    """Full Lorenz 96 state from D^0..D^j of coordinates 0, 1, 2.

    ``derivs`` has shape (j + 1, 3). The forward recursion gives coordinates
    3, 4, ... and the backward one d-1, d-2, ...; forward values win on overlap.
    """
    X = np.asarray(derivs, dtype=float)
    j = X.shape[0] - 1
    if d is None:
        d = 3 + 3 * j
    if X.shape != (j + 1, 3) or first3_depth(d) != j:
        raise InvalidDimensionError(f"need {first3_depth(d) + 1} derivative orders for d={d}")
    fv = _forcing(f, d)
    floor = DIVISOR_FLOOR * R if floor is None else floor

    def seed():
        return {i: list(X[:, i]) for i in range(3)}

    fwd = seed()
    for i in range(3, 3 + j):
        a, b, c = fwd[i - 1], fwd[i - 2], fwd[i - 3]
        n = min(len(a) - 2, len(b) - 1, len(c) - 1)
        cur: list = []
        for m in range(n + 1):
            num = a[m + 1] + a[m] + _binom_sum(b, c, m, m) - (fv[i - 1] if m == 0 else 0.0)
            num -= sum(math.comb(m, l) * cur[l] * b[m - l] for l in range(m))
            cur.append(_div(num, b[0], floor, i - 2))
        fwd[i] = cur

    bwd = seed()
    i = d - 1
    while i >= 3:
        a, b, c = bwd[(i + 2) % d], bwd[(i + 1) % d], bwd[(i + 3) % d]
        n = min(len(a) - 2, len(b) - 1, len(c) - 1)
        if n < 0:
            break
        cur = []
        for m in range(n + 1):
            num = -a[m + 1] - a[m] + _binom_sum(b, c, m, m) + (fv[(i + 2) % d] if m == 0 else 0.0)
            num -= sum(math.comb(m, l) * cur[l] * b[m - l] for l in range(m))
            cur.append(_div(num, b[0], floor, (i + 1) % d))
        bwd[i] = cur
        i -= 1

    u = np.empty(d)
    for i in range(d):
        src = fwd.get(i) or bwd.get(i)
        if not src:
            raise InvalidDimensionError(f"coordinate {i} not reachable with j={j}")
        u[i] = src[0]
    return u


def _ls_objective(v, derivs, H: ObservationOperator, sys: BilinearSystem):
    j = len(derivs) - 1
    a = K.series(v, j, *sys.kargs[:-1])
    b = K.tangent_series(a, np.eye(sys.dim), *sys.kargs[:-2])
    val = 0.0
    grad = np.zeros(sys.dim)
    for i in range(j + 1):
        fac = math.factorial(i)
        r = H.apply(a[i] * fac) - derivs[i]
        val += r @ r
        grad += 2.0 * fac * (H.apply_cols(b[i]).T @ r)
    return val, grad


def generic_least_squares_F(derivs: Sequence, sys: BilinearSystem, H: ObservationOperator,
                            starts: Sequence | None = None, n_starts: int = DEFAULT_STARTS,
                            seed: int = 0) -> np.ndarray:
    """argmin over the ball of sum_i ||H D^i v - x^(i)||^2 by multi-start SQP."""
    derivs = [np.asarray(x, dtype=float) for x in derivs]
    R = sys.R
    rng = rng_for(seed, 1)
    pts = [sys.project(H.apply_T(derivs[0]))]
    pts += [np.asarray(s, dtype=float) for s in (starts or [])]
    while len(pts) < n_starts:
        g = rng.standard_normal(sys.dim)
        pts.append(0.5 * R * g / np.linalg.norm(g))
    cons = {"type": "ineq", "fun": lambda v: R * R - v @ v, "jac": lambda v: -2.0 * v}
    best, best_val, descended = None, math.inf, False
    for x in pts:
        x = sys.project(x)
        f0, _ = _ls_objective(x, derivs, H, sys)
        res = optimize.minimize(_ls_objective, x, args=(derivs, H, sys), jac=True, method="SLSQP",
                                constraints=[cons], options={"maxiter": 500, "ftol": 1e-30})
        v = sys.project(res.x)
        val, _ = _ls_objective(v, derivs, H, sys)
        if val <= f0:
            descended = True
        if val < best_val:
            best, best_val = v, val
        if f0 < best_val:
            best, best_val = x, f0
        if best_val == 0.0:
            break
    if not descended:
        raise OptimizationFailure("no start descended on the least-squares objective")
    return best


def estimate_observed_derivatives(Y, j: int, plan: ReconstructionPlan,
                                  p: deriv_est.BudgetParams) -> list[np.ndarray]:
    k = Y.shape[0] - 1
    return [deriv_est.estimate_derivative(Y, l, plan.cap(l, k), p).value for l in range(j + 1)]


def reconstruct(plan: ReconstructionPlan, derivs: Sequence, sys: BilinearSystem,
                H: ObservationOperator) -> np.ndarray:
    if plan.scenario is Scenario.HALF_BLOCKS:
        return reconstruct_halfblocks(derivs[0], derivs[1], sys, sys.R)
    if plan.scenario is Scenario.FIRST3:
        return reconstruct_first3(np.vstack(derivs), sys, sys.R, d=sys.dim)
    return generic_least_squares_F(derivs, sys, H)


@dataclass
class AnchorResult:
    anchor: int
    candidate: np.ndarray | None
    score: float
    error: str | None = None


@dataclass
class InitialEstimate:
    x0: np.ndarray
    anchors: list[AnchorResult] = field(default_factory=list)


def initial_estimate_multianchor(Y, plan: ReconstructionPlan, sys: BilinearSystem,
                                 setup: ObservationSetup,
                                 score: Callable[[np.ndarray], float] | None = None) -> InitialEstimate:
    """Reconstruct at each anchor, pull back to t = 0, keep the most probable."""
    Y = np.asarray(Y, dtype=float)
    p = deriv_est.BudgetParams.from_problem(sys, setup)
    if score is None:
        from .map_solver import SmoothingProblem, log_posterior
        from .observation import ObservationRecord
        prob = SmoothingProblem(sys, setup, ObservationRecord(Y))
        score = lambda v: log_posterior(prob, v)  # noqa: E731
    results = []
    for a in plan.anchors:
        try:
            derivs = estimate_observed_derivatives(Y[a:], plan.j, plan, p)
            u = sys.project(reconstruct(plan, derivs, sys, setup.H))
            if a > 0:
                u = sys.project(dynamics.flow_backward(sys, u, a * setup.h))
            results.append(AnchorResult(a, u, float(score(u))))
        except (DegenerateInputError, InsufficientDataError, OptimizationFailure, FloatingPointError) as exc:
            results.append(AnchorResult(a, None, -math.inf, f"{type(exc).__name__}: {exc}"))
    ok = [r for r in results if r.candidate is not None and np.all(np.isfinite(r.candidate))]
    if not ok:
        raise InitializationFailure("; ".join(f"anchor {r.anchor}: {r.error}" for r in results))
    best = max(ok, key=lambda r: r.score)
    return InitialEstimate(best.candidate, results)
