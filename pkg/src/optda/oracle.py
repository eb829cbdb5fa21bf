"""Brute-force reference posteriors for d <= 4.

The smoothing density is tabulated on a tensor grid and normalised by the
trapezoid rule. This gives the exact posterior mean and lets us measure how
far the Gaussian approximations and the MAP are from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import _kernels as K
from .dynamics import BilinearSystem
from .errors import GridTooSmallError, InvalidDimensionError
from .gaussian_approx import GaussianApprox, assemble_AkBk
from .map_solver import SmoothingProblem, newton_solve
from .observation import rng_for

MAX_GRID_DIM = 4
EDGE_MASS_TOL = 1e-6


def toy2d(a: float = 1.0, f=(2.0, 1.0)) -> BilinearSystem:
    """Two-dimensional energy-conserving bilinear system.

    du1/dt = -u1 - a u1 u2 + f1,   du2/dt = -u2 + a u1^2 + f2.
    """
    f = np.asarray(f, dtype=float)
    return BilinearSystem(
        A=np.ones(2),
        b_index=np.array([(0, 1, 0), (1, 0, 0), (0, 0, 1)]),
        b_coeff=np.array([a / 2, a / 2, -a]),
        f=f, R=float(np.linalg.norm(f)), name=f"toy2d(a={a:g})",
    )


def linear_system(A, R: float = 10.0) -> BilinearSystem:
    """du/dt = -A u; any radius traps when A + A' is positive semi-definite."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    return BilinearSystem(A=A, b_index=np.zeros((0, 3), dtype=np.int64), b_coeff=np.zeros(0),
                          f=np.zeros(d), R=R, b_norm=0.0, name="linear")


@dataclass(frozen=True)
class GridSpec:
    center: np.ndarray
    half_width: np.ndarray
    n: int = 201

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(c - w, c + w, self.n) for c, w in zip(self.center, self.half_width)]


@dataclass(eq=False)
class GridPosterior:
    axes: list
    log_density: np.ndarray  # normalised, -inf outside the ball
    log_norm: float
    mean: np.ndarray
    covariance: np.ndarray
    argmax: np.ndarray
    edge_mass: float

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def integrate(self, values) -> float:
        out = values
        for ax in reversed(range(len(self.axes))):
            out = integrate.trapezoid(out, self.axes[ax], axis=ax)
        return float(out)

    def cell_widths(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])


def _unnormalised_log(problem: SmoothingProblem, V: np.ndarray) -> np.ndarray:
    p = problem
    X = K.forward_obs_many(np.ascontiguousarray(V), p.setup.k, p.sub, p.i_max, *p.sys.kargs)
    r = p.setup.H.apply(X) - p.Y[None]
    out = -0.5 * p.weight * np.sum(r * r, axis=(1, 2))
    out[np.linalg.norm(V, axis=1) > p.sys.R] = -np.inf
    return out


def grid_posterior(problem: SmoothingProblem, spec: GridSpec) -> GridPosterior:
    d = problem.dim
    if d > MAX_GRID_DIM:
        raise InvalidDimensionError(f"grid posterior limited to d <= {MAX_GRID_DIM}")
    axes = spec.axes()
    shape = tuple(a.size for a in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    V = np.stack([m.ravel() for m in mesh], axis=1)
    logp = _unnormalised_log(problem, V).reshape(shape)
    top = float(np.max(logp))
    if not np.isfinite(top):
        raise GridTooSmallError("grid lies outside the trapping ball")
    w = np.exp(logp - top)
    gp = GridPosterior(axes, logp, 0.0, np.zeros(d), np.zeros((d, d)), V[int(np.argmax(logp))], 0.0)
    Z = gp.integrate(w)
    dens = w / Z
    mean = np.array([gp.integrate(dens * m) for m in mesh])
    cov = np.array([[gp.integrate(dens * (mi - mean[i]) * (mj - mean[j])) for j, mj in enumerate(mesh)]
                    for i, mi in enumerate(mesh)])
    # probability carried by the outermost layer of cells
    edge = np.zeros(shape, dtype=bool)
    for ax in range(d):
        sl = [slice(None)] * d
        sl[ax] = 0
        edge[tuple(sl)] = True
        sl[ax] = -1
        edge[tuple(sl)] = True
    edge_mass = float(np.sum(dens[edge]) * np.prod(gp.cell_widths()))
    with np.errstate(divide="ignore"):
        gp.log_density = np.log(dens)
    gp.log_norm = top + math.log(Z)
    gp.mean, gp.covariance, gp.edge_mass = mean, cov, edge_mass
    if edge_mass > EDGE_MASS_TOL:
        raise GridTooSmallError(f"grid boundary holds {edge_mass:.2e} of the mass")
    return gp


def auto_grid(problem: SmoothingProblem, start, n: int = 201, width: float = 8.0) -> tuple[GridSpec, np.ndarray]:
    """Grid centred on the MAP reached from ``start``, covering +-width Laplace std."""
    u_map, trace = newton_solve(problem, start, mode="dense")
    A, _ = assemble_AkBk(problem, u_map)
    cov = problem.setup.sigma_z ** 2 * np.linalg.inv(A) if problem.setup.sigma_z > 0 else np.linalg.inv(A)
    hw = width * np.sqrt(np.clip(np.diag(cov), 1e-300, None))
    return GridSpec(u_map.copy(), hw, n), u_map


def gaussian_on_grid(p: GridPosterior, q: GaussianApprox) -> np.ndarray:
    shape = p.log_density.shape
    return np.exp(q.logpdf(p.points())).reshape(shape)


def tv_distance(p: GridPosterior, q: GaussianApprox) -> float:
    """Half the L1 distance; q's mass off the grid counts fully."""
    qd = gaussian_on_grid(p, q)
    inside = p.integrate(np.abs(p.density - qd))
    q_out = max(0.0, 1.0 - p.integrate(qd))
    return 0.5 * (inside + q_out)


def w1_distance_mc(p: GridPosterior, q: GaussianApprox, n_samples: int = 20000, seed: int = 0) -> float:
    """Upper bound on W1 from the coupling that keeps the common part min(p, q) fixed."""
    qd = gaussian_on_grid(p, q)
    cell = float(np.prod(p.cell_widths()))
    pos = np.clip(p.density - qd, 0, None).ravel() * cell
    neg = np.clip(qd - p.density, 0, None).ravel() * cell
    tv = 0.5 * (pos.sum() + neg.sum())
    if tv == 0.0 or pos.sum() == 0.0 or neg.sum() == 0.0:
        return 0.0
    rng = rng_for(seed, 7)
    pts = p.points()
    xi = rng.choice(pts.shape[0], size=n_samples, p=pos / pos.sum())
    yi = rng.choice(pts.shape[0], size=n_samples, p=neg / neg.sum())
    return float(tv * np.mean(np.linalg.norm(pts[xi] - pts[yi], axis=1)))


def importance_mean(problem: SmoothingProblem, q: GaussianApprox, n: int = 20000, seed: int = 0):
    """Self-normalised importance-sampling posterior mean with proposal q; returns (mean, ess)."""
    rng = rng_for(seed, 11)
    V = q.sample(n, rng)
    lw = _unnormalised_log(problem, V) - q.logpdf(V)
    lw -= np.max(lw)
    w = np.exp(lw)
    w /= w.sum()
    return w @ V, float(1.0 / np.sum(w * w))


@dataclass
class MSEResult:
    mse_mean: float
    mse_map: float
    ratio: float
    ratio_stderr: float
    diff_stderr: float
    n: int


def mse_ratio(problem_factory, truth, seeds, n: int = 201, width: float = 8.0) -> MSEResult:
    """Monte-Carlo MSE of the grid posterior mean and the Newton MAP over seeds.

    ``problem_factory(seed)`` returns a SmoothingProblem for that seed.
    """
    truth = np.asarray(truth, dtype=float)
    em, ep = [], []
    for s in seeds:
        prob = problem_factory(s)
        spec, u_map = auto_grid(prob, truth, n, width)
        gp = grid_posterior(prob, spec)
        em.append(float(np.sum((gp.mean - truth) ** 2)))
        ep.append(float(np.sum((u_map - truth) ** 2)))
    em, ep = np.array(em), np.array(ep)
    m = len(em)
    a, b = em.mean(), ep.mean()
    ratio = b / a
    # delta method on the ratio of two correlated means
    cov = np.cov(np.vstack([ep, em])) / m
    r_se = math.sqrt(max(cov[0, 0] / a**2 - 2 * b * cov[0, 1] / a**3 + b**2 * cov[1, 1] / a**4, 0.0))
    d_se = float(np.std(em - ep, ddof=1) / math.sqrt(m))
    return MSEResult(a, b, ratio, r_se, d_se, m)
