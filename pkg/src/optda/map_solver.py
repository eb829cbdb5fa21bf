"""Negative log-posterior, its derivatives, Newton's method and the smoothing/filtering drivers.

The objective is

    g(v) = 1 / (2 sigma_z^2) * sum_i ||Y_i - H Psi_{t_i}(v)||^2

with a uniform prior on the trapping ball, so the prior adds only a constant.
Gradients use one forward sweep and one reverse sweep. Hessians come either
dense, by differencing the gradient, or as matrix-free products made of an
exact Gauss-Newton part and a differenced curvature part.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from . import _kernels as K
from . import dynamics, init_est
from .dynamics import BilinearSystem
from .errors import (
    InitializationFailure,
    InvalidDimensionError,
    OptdaError,
    OutOfBallError,
)
from .observation import ObservationRecord, ObservationSetup, substeps

DENSE_MAX_DIM = 64
CG_TOL = 1e-10
CG_MAX_ITERS = 500
FD_GRAD_STEP = 1e-6
FD_HESS_STEP = 1e-5
CURVATURE_STEP = 1e-5
PROBE_COLORS = 64
MAX_SHIFTS = 60
BOUNDARY_GAP = 1e-9


class BoundaryGradientWarning(UserWarning):
    """Derivative requested within 1e-9 of the trapping sphere."""


@dataclass(eq=False)
class SmoothingProblem:
    """A system, an observation setup and the observations Y_0..Y_k."""

    sys: BilinearSystem
    setup: ObservationSetup
    record: ObservationRecord
    step: float | None = None
    i_max: int = dynamics.DEFAULT_ORDER

    def __post_init__(self):
        if self.record.Y.shape != (self.setup.k + 1, self.setup.dim_obs):
            raise InvalidDimensionError(
                f"record has shape {self.record.Y.shape}, expected ({self.setup.k + 1}, {self.setup.dim_obs})")
        if self.setup.H.dim != self.sys.dim:
            raise InvalidDimensionError("observation operator and system disagree on d")
        self.sub = substeps(self.sys, self.setup.h, self.step)
        self.Y = np.ascontiguousarray(self.record.Y, dtype=float)

    @property
    def dim(self) -> int:
        return self.sys.dim

    @property
    def weight(self) -> float:
        # sigma_z = 0 keeps the minimiser; scale the misfit by one instead
        s = self.setup.sigma_z
        return 1.0 / (s * s) if s > 0 else 1.0

    def _fwd(self, v):
        return K.forward_obs(np.ascontiguousarray(v, dtype=float), self.setup.k, self.sub,
                             self.i_max, *self.sys.kargs)

    def residuals(self, v) -> np.ndarray:
        """H Psi_{t_i}(v) - Y_i for i = 0..k."""
        X, _ = self._fwd(v)
        return self.setup.H.apply(X) - self.Y

    def objective(self, v) -> float:
        r = self.residuals(v)
        return 0.5 * self.weight * float(np.sum(r * r))

    def near_boundary(self, v) -> bool:
        return float(np.linalg.norm(v)) > self.sys.R - BOUNDARY_GAP


def log_posterior(problem: SmoothingProblem, v) -> float:
    """-g(v), or -inf outside the trapping ball."""
    v = np.asarray(v, dtype=float)
    if not problem.sys.in_ball(v):
        return -math.inf
    return -problem.objective(v)


def _warn_boundary(problem, v):
    if problem.near_boundary(v):
        warnings.warn("gradient evaluated at the edge of the trapping ball", BoundaryGradientWarning,
                      stacklevel=3)


def _adjoint_gradient(problem: SmoothingProblem, v):
    X, ck = problem._fwd(v)
    H = problem.setup.H
    r = H.apply(X) - problem.Y
    inj = np.ascontiguousarray(H.apply_T(r) * problem.weight)
    g = K.adjoint_obs(ck, inj, problem.sub, problem.i_max, *problem.sys.kargs)
    return g, r


def gradient(problem: SmoothingProblem, v, mode: str = "adjoint") -> np.ndarray:
    """Gradient of g by the adjoint sweep or by central differences."""
    v = np.asarray(v, dtype=float)
    if not problem.sys.in_ball(v):
        raise OutOfBallError("gradient requested outside the trapping ball")
    _warn_boundary(problem, v)
    if mode == "adjoint":
        return _adjoint_gradient(problem, v)[0]
    if mode == "fd":
        eps = FD_GRAD_STEP * max(1.0, float(np.linalg.norm(v)))
        out = np.empty_like(v)
        for i in range(v.size):
            e = np.zeros_like(v)
            e[i] = eps
            out[i] = (problem.objective(v + e) - problem.objective(v - e)) / (2 * eps)
        return out
    raise ValueError(f"unknown gradient mode {mode!r}")


def hessian_dense(problem: SmoothingProblem, v) -> np.ndarray:
    """Full Hessian by central differences of the adjoint gradient, symmetrised."""
    v = np.asarray(v, dtype=float)
    d = v.size
    eps = FD_HESS_STEP * max(1.0, float(np.linalg.norm(v)))
    Hm = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        Hm[:, i] = (_adjoint_gradient(problem, v + e)[0] - _adjoint_gradient(problem, v - e)[0]) / (2 * eps)
    return 0.5 * (Hm + Hm.T)


class MatrixFreeHessian:
    """Hessian-vector products of g at a fixed point v."""

    def __init__(self, problem: SmoothingProblem, v):
        self.p = problem
        self.v = np.ascontiguousarray(v, dtype=float)
        X, self.ck = problem._fwd(self.v)
        H = problem.setup.H
        self.r = H.apply(X) - problem.Y
        self.inj_r = np.ascontiguousarray(H.apply_T(self.r) * problem.weight)
        self.grad = K.adjoint_obs(self.ck, self.inj_r, problem.sub, problem.i_max, *problem.sys.kargs)
        self.has_residual = bool(np.any(self.r != 0.0))
        self.nprod = 0

    def gauss_newton(self, w):
        p = self.p
        H = p.setup.H
        _, TW = K.tangent_obs(self.v, np.ascontiguousarray(w, dtype=float).reshape(-1, 1), p.setup.k,
                              p.sub, p.i_max, *p.sys.kargs)
        JW = H.apply(TW[:, :, 0])
        inj = np.ascontiguousarray(H.apply_T(JW) * p.weight)
        return K.adjoint_obs(self.ck, inj, p.sub, p.i_max, *p.sys.kargs)

    def curvature(self, w):
        """sum_i J^2 Phi_i[w, ., r_i] with the residuals frozen at v."""
        if not self.has_residual:
            return np.zeros_like(self.v)
        p = self.p
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return np.zeros_like(self.v)
        eps = CURVATURE_STEP * max(1.0, float(np.linalg.norm(self.v))) / nw
        out = []
        for s in (eps, -eps):
            _, ck = p._fwd(self.v + s * w)
            out.append(K.adjoint_obs(ck, self.inj_r, p.sub, p.i_max, *p.sys.kargs))
        return (out[0] - out[1]) / (2 * eps)

    def __call__(self, w):
        self.nprod += 1
        return self.gauss_newton(w) + self.curvature(w)

    def gn_diagonal(self) -> np.ndarray:
        """Diagonal of the Gauss-Newton matrix, exact for small d, probed otherwise."""
        p = self.p
        d = p.dim
        H = p.setup.H
        if d <= DENSE_MAX_DIM:
            _, TW = K.tangent_obs(self.v, np.eye(d), p.setup.k, p.sub, p.i_max, *p.sys.kargs)
            JW = np.stack([H.apply_cols(T) for T in TW])
            return p.weight * np.einsum("kij,kij->j", JW, JW)
        # banded probing: columns sharing a colour are PROBE_COLORS apart, and each
        # observed row is credited to the same-colour column nearest to it
        P = PROBE_COLORS
        rows = H.index if H.index is not None else None
        if rows is None:
            raise InvalidDimensionError("probing needs a selection operator")
        diag = np.zeros(d)
        W = np.zeros((d, P))
        W[np.arange(d), np.arange(d) % P] = 1.0
        _, TW = K.tangent_obs(self.v, W, p.setup.k, p.sub, p.i_max, *p.sys.kargs)
        for c in range(P):
            JW = TW[:, rows, c]  # (k+1, d_o)
            # nearest same-colour column on the circle
            off = (rows - c) % P
            near = rows - off + np.where(off > P // 2, P, 0)
            near = near % d
            ok = (near % P) == c
            contrib = np.sum(JW * JW, axis=0)
            np.add.at(diag, near[ok], contrib[ok])
        return p.weight * diag


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    negative_curvature: bool


def pcg(apply_A: Callable, b, precond=None, tol: float = CG_TOL, max_iters: int = CG_MAX_ITERS,
        shift: float = 0.0) -> CGResult:
    """Preconditioned conjugate gradients on (A + shift I) x = b."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return CGResult(x, 0, True, False)
    z = r * precond if precond is not None else r.copy()
    pdir = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iters + 1):
        Ap = apply_A(pdir) + shift * pdir
        curv = float(pdir @ Ap)
        if curv <= 0.0:
            return CGResult(x, it, False, True)
        alpha = rz / curv
        x += alpha * pdir
        r -= alpha * Ap
        if float(np.linalg.norm(r)) <= tol * bnorm:
            return CGResult(x, it, True, False)
        z = r * precond if precond is not None else r
        rz_new = float(r @ z)
        pdir = z + (rz_new / rz) * pdir
        rz = rz_new
    return CGResult(x, max_iters, False, False)


@dataclass
class NewtonTrace:
    iterates: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    hessian_mode: str = "dense"
    shifts: list = field(default_factory=list)
    cg_iterations: list = field(default_factory=list)
    converged: bool = False
    boundary: bool = False
    message: str = ""

    @property
    def iterations(self) -> int:
        return len(self.step_norms)


def resolve_mode(mode: str | None, d: int) -> str:
    if mode in (None, "auto"):
        return "dense" if d <= DENSE_MAX_DIM else "matfree"
    if mode not in ("dense", "matfree"):
        raise ValueError(f"unknown hessian mode {mode!r}")
    return mode


def hessian_apply(problem: SmoothingProblem, v, w, mode: str = "dense") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if not problem.sys.in_ball(v):
        raise OutOfBallError("Hessian requested outside the trapping ball")
    _warn_boundary(problem, v)
    if mode == "dense":
        return hessian_dense(problem, v) @ np.asarray(w, dtype=float)
    if mode == "matfree":
        return MatrixFreeHessian(problem, v)(np.asarray(w, dtype=float))
    raise ValueError(f"unknown hessian mode {mode!r}")


def _newton_direction(problem, x, mode):
    """Return (g, solve) where solve(shift) gives the step or None on failure."""
    if mode == "dense":
        g, _ = _adjoint_gradient(problem, x)
        Hm = hessian_dense(problem, x)
        scale = max(float(np.trace(Hm)) / x.size, 1e-300)

        def solve(lam):
            try:
                c = linalg.cho_factor(Hm + lam * np.eye(x.size))
            except linalg.LinAlgError:
                return None, 0
            return -linalg.cho_solve(c, g), 0
        return g, solve, scale
    Hop = MatrixFreeHessian(problem, x)
    g = Hop.grad
    diag = Hop.gn_diagonal()
    scale = max(float(np.sum(diag)) / x.size, 1e-300)
    pos = diag > 0
    precond = np.where(pos, 1.0 / np.where(pos, diag, 1.0), 1.0 / scale)

    def solve(lam):
        res = pcg(Hop, -g, precond / (1.0 + lam * precond) if lam else precond, shift=lam)
        if res.negative_curvature:
            return None, res.iterations
        return res.x, res.iterations
    return g, solve, scale


def newton_solve(problem: SmoothingProblem, x0, delta_min: float | None = None, max_iters: int = 50,
                 mode: str | None = None) -> tuple[np.ndarray, NewtonTrace]:
    """Newton iterations with a Levenberg shift on failure or ascent, projected to the ball."""
    sys = problem.sys
    mode = resolve_mode(mode, sys.dim)
    delta_min = 1e-10 * sys.R if delta_min is None else delta_min
    x = np.asarray(x0, dtype=float)
    if not sys.in_ball(x):
        raise OutOfBallError("initial point outside the trapping ball")
    x = sys.project(x)
    trace = NewtonTrace(hessian_mode=mode)
    fx = problem.objective(x)
    trace.iterates.append(x.copy())
    trace.objective.append(fx)
    for _ in range(max_iters):
        if problem.near_boundary(x):
            trace.boundary = True
        g, solve, scale = _newton_direction(problem, x, mode)
        lam = 0.0
        accepted = None
        cg_its = 0
        for attempt in range(MAX_SHIFTS + 1):
            s, its = solve(lam)
            cg_its += its
            if s is not None and np.all(np.isfinite(s)):
                xn = sys.project(x + s)
                fn = problem.objective(xn)
                if fn <= fx + 1e-12 * abs(fx):
                    accepted = (xn, fn)
                    break
            lam = 1e-8 * scale if lam == 0.0 else 2.0 * lam
        if accepted is None:
            trace.message = "no descent step found"
            break
        xn, fn = accepted
        step = float(np.linalg.norm(xn - x))
        trace.shifts.append(lam)
        trace.cg_iterations.append(cg_its)
        trace.step_norms.append(step)
        trace.iterates.append(xn.copy())
        trace.objective.append(fn)
        x, fx = xn, fn
        if step < delta_min:
            trace.converged = True
            break
    if not trace.converged and not trace.message:
        trace.message = f"no convergence in {max_iters} iterations"
    return x, trace


@dataclass
class SmoothConfig:
    delta_min: float | None = None
    max_iters: int = 50
    hessian: str | None = None
    caps: Sequence[int] | None = None
    anchors: Sequence[int] | None = None
    j: int | None = None


REPORT_SCHEMA = {
    "type": "object",
    "required": ["x0", "u_map", "u_filter", "iterations", "step_norms", "objective", "converged"],
    "properties": {
        "x0": {"type": "array", "items": {"type": "number"}},
        "u_map": {"type": "array", "items": {"type": "number"}},
        "u_filter": {"type": "array", "items": {"type": "number"}},
        "iterations": {"type": "integer", "minimum": 0},
        "step_norms": {"type": "array", "items": {"type": "number"}},
        "objective": {"type": "array", "items": {"type": "number"}},
        "converged": {"type": "boolean"},
        "hessian_mode": {"type": "string", "enum": ["dense", "matfree"]},
        "rmse_vs_truth": {"type": ["number", "null"]},
        "rmse_x0": {"type": ["number", "null"]},
        "message": {"type": "string"},
    },
}


@dataclass
class EstimateReport:
    x0: np.ndarray
    u_map: np.ndarray
    u_filter: np.ndarray
    trace: NewtonTrace
    rmse_vs_truth: float | None = None
    rmse_x0: float | None = None
    init_note: str = ""

    @property
    def converged(self) -> bool:
        return self.trace.converged

    def to_dict(self) -> dict:
        return {
            "x0": [float(a) for a in self.x0],
            "u_map": [float(a) for a in self.u_map],
            "u_filter": [float(a) for a in self.u_filter],
            "iterations": self.trace.iterations,
            "step_norms": [float(a) for a in self.trace.step_norms],
            "objective": [float(a) for a in self.trace.objective],
            "converged": bool(self.trace.converged),
            "hessian_mode": self.trace.hessian_mode,
            "rmse_vs_truth": self.rmse_vs_truth,
            "rmse_x0": self.rmse_x0,
            "message": self.trace.message or self.init_note,
        }

    def to_json(self) -> str:
        # repr round-trips doubles exactly, so the text is reproducible
        return json.dumps(self.to_dict(), indent=2)


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.linalg.norm(a - np.asarray(b, dtype=float)) / math.sqrt(a.size))


def initial_point(problem: SmoothingProblem, config: SmoothConfig) -> tuple[np.ndarray, str]:
    """Multi-anchor initial point, falling back to the least-squares inversion if every anchor fails."""
    sys, setup = problem.sys, problem.setup
    plan = init_est.make_plan(setup.H, sys, setup.k, setup.h, config.j, config.anchors, config.caps)
    try:
        est = init_est.initial_estimate_multianchor(problem.Y, plan, sys, setup,
                                                    score=lambda v: log_posterior(problem, v))
        return est.x0, ""
    except InitializationFailure as exc:
        from . import deriv_est
        p = deriv_est.BudgetParams.from_problem(sys, setup)
        derivs = init_est.estimate_observed_derivatives(problem.Y, plan.j, plan, p)
        x0 = init_est.generic_least_squares_F(derivs, sys, setup.H)
        return x0, f"fallback to least squares ({exc})"


def smooth(problem: SmoothingProblem, config: SmoothConfig | None = None, truth=None,
           x0=None) -> EstimateReport:
    """Initial estimate followed by Newton's method; also pushes the MAP forward to T."""
    config = config or SmoothConfig()
    note = ""
    if x0 is None:
        x0, note = initial_point(problem, config)
    u_map, trace = newton_solve(problem, x0, config.delta_min, config.max_iters, config.hessian)
    X, _ = problem._fwd(u_map)
    rep = EstimateReport(x0=np.asarray(x0, dtype=float), u_map=u_map, u_filter=X[-1].copy(), trace=trace,
                         init_note=note)
    if truth is not None:
        rep.rmse_vs_truth = rmse(u_map, truth)
        rep.rmse_x0 = rmse(x0, truth)
    return rep


@dataclass
class FilterOutput:
    estimates: np.ndarray
    refreshed: np.ndarray
    failed: np.ndarray
    reports: dict


def filter_stream(sys: BilinearSystem, setup: ObservationSetup, Y, K_stride: int = 1,
                  config: SmoothConfig | None = None, step: float | None = None,
                  i_max: int = dynamics.DEFAULT_ORDER) -> FilterOutput:
    """Online estimates of u(t_i) from Y_0..Y_i using windows of k + 1 observations.

    Before index k the estimate is zero. Every ``K_stride`` steps from index k
    on, the window Y_{i-k..i} is smoothed from scratch and its MAP pushed to
    t_i; in between, the last estimate is moved forward by one interval.
    """
    if K_stride < 1:
        raise ValueError("refresh stride must be at least 1")
    Y = np.asarray(Y, dtype=float)
    n, d = Y.shape[0], sys.dim
    k = setup.k
    est = np.zeros((n, d))
    refreshed = np.zeros(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    reports = {}
    sub = substeps(sys, setup.h, step)
    last = None
    for i in range(k, n):
        if (i - k) % K_stride == 0:
            prob = SmoothingProblem(sys, setup, ObservationRecord(Y[i - k:i + 1]), step, i_max)
            try:
                rep = smooth(prob, config)
                ok = rep.converged
            except OptdaError:
                rep, ok = None, False
            if ok:
                last = rep.u_filter
                refreshed[i] = True
                reports[i] = rep
            else:
                failed[i] = True
                if last is not None:
                    last = K.propagate(last, sub, i_max, *sys.kargs)
                elif rep is not None:
                    last = rep.u_filter
        elif last is not None:
            last = K.propagate(last, sub, i_max, *sys.kargs)
        if last is not None:
            est[i] = last
    return FilterOutput(est, refreshed, failed, reports)
