"""Gaussian approximations of the smoothing and filtering distributions.

With residuals ``Z_i = Phi_{t_i}(u_ref) - Y_i``

    A_k = sum_i J_i' J_i + J^2 Phi_i[., ., Z_i],    B_k = sum_i J_i' Z_i,

A_k is the Hessian of ``1/2 sum_i ||Y_i - Phi_{t_i}||^2`` at u_ref, B_k its
gradient, and ``u^G = u_ref - A_k^{-1} B_k`` is one Newton step from u_ref.
All densities have the form ``exp(-(v - c)' P (v - c) / (2 sigma_z^2))``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _kernels as K
from . import dynamics
from .errors import MatrixFreeUnsupportedError, NotPositiveDefiniteError, NumericalError
from .map_solver import SmoothingProblem

DENSE_CAP = 256
CURVATURE_STEP = 1e-5


class Kind(str, enum.Enum):
    SMOOTHER_THEORY = "smoother_theory"
    SMOOTHER_LAPLACE = "smoother_laplace"
    FILTER_PUSHFORWARD = "filter_pushforward"


@dataclass(eq=False)
class GaussianApprox:
    center: np.ndarray
    precision_scale: np.ndarray
    sigma_z: float
    kind: Kind
    fallback: bool = False
    log_abs_det_jac: float = 0.0

    @property
    def dim(self) -> int:
        return self.center.size

    def covariance(self) -> np.ndarray:
        return self.sigma_z ** 2 * linalg.inv(self.precision_scale)

    def _chol(self):
        try:
            return linalg.cholesky(self.precision_scale, lower=True)
        except linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("precision matrix is not positive definite") from exc

    def logpdf(self, V) -> np.ndarray:
        """Log density at the rows of ``V`` (or at a single point)."""
        V = np.asarray(V, dtype=float)
        L = self._chol()
        D = V - self.center
        q = np.sum((D @ L) ** 2, axis=-1)
        d = self.dim
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return 0.5 * logdet - 0.5 * d * math.log(2 * math.pi) - d * math.log(self.sigma_z) - q / (2 * self.sigma_z ** 2)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        L = self._chol()
        E = rng.standard_normal((n, self.dim))
        # P = L L' so L'^{-1} e has covariance P^{-1}
        return self.center + self.sigma_z * linalg.solve_triangular(L.T, E.T, lower=False).T

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "sigma_z": self.sigma_z,
            "center": [float(a) for a in self.center],
            "precision": [[float(a) for a in row] for row in self.precision_scale],
            "fallback": self.fallback,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _check_cap(d: int):
    if d > DENSE_CAP:
        raise MatrixFreeUnsupportedError(f"dense Gaussian objects refused above d = {DENSE_CAP} (got {d})")


def observed_jacobians(problem: SmoothingProblem, v) -> np.ndarray:
    """H J Psi_{t_i}(v) for i = 0..k, shape (k+1, d_o, d)."""
    p = problem
    v = np.ascontiguousarray(v, dtype=float)
    _, TW = K.tangent_obs(v, np.eye(p.dim), p.setup.k, p.sub, p.i_max, *p.sys.kargs)
    return np.stack([p.setup.H.apply_cols(T) for T in TW])


def assemble_AkBk(problem: SmoothingProblem, u_ref) -> tuple[np.ndarray, np.ndarray]:
    """A_k and B_k at ``u_ref`` with residuals Phi_{t_i}(u_ref) - Y_i."""
    p = problem
    d = p.dim
    _check_cap(d)
    u = np.ascontiguousarray(u_ref, dtype=float)
    dynamics._check_ball(p.sys, u)
    H = p.setup.H
    X, ck = p._fwd(u)
    Z = H.apply(X) - p.Y
    J = observed_jacobians(p, u)
    A = np.einsum("kij,kil->jl", J, J)
    inj = np.ascontiguousarray(H.apply_T(Z))
    B = K.adjoint_obs(ck, inj, p.sub, p.i_max, *p.sys.kargs)
    if np.any(Z != 0.0):
        eps = CURVATURE_STEP * max(1.0, float(np.linalg.norm(u)))
        C = np.empty((d, d))
        for c in range(d):
            cols = []
            for s in (eps, -eps):
                w = u.copy()
                w[c] += s
                _, ckw = p._fwd(w)
                cols.append(K.adjoint_obs(ckw, inj, p.sub, p.i_max, *p.sys.kargs))
            C[:, c] = (cols[0] - cols[1]) / (2 * eps)
        A = A + 0.5 * (C + C.T)
    return 0.5 * (A + A.T), B


def _standard_normal(d: int, sigma_z: float, kind: Kind) -> GaussianApprox:
    # unit covariance expressed in the sigma_z-scaled precision convention
    return GaussianApprox(np.zeros(d), sigma_z ** 2 * np.eye(d), sigma_z, kind, fallback=True)


def _is_pd(A) -> bool:
    try:
        linalg.cholesky(A, lower=True)
        return True
    except linalg.LinAlgError:
        return False


def smoother_gaussian(problem: SmoothingProblem, kind: Kind | str, u_ref=None, strict: bool = False) -> GaussianApprox:
    """Theory kind: centre u^G from ``u_ref`` (the truth). Laplace kind: ``u_ref`` is the MAP."""
    kind = Kind(kind)
    if u_ref is None:
        raise ValueError("u_ref is required: the truth for the theory kind, the MAP for Laplace")
    sigma = problem.setup.sigma_z
    A, B = assemble_AkBk(problem, u_ref)
    if not _is_pd(A):
        if strict or kind is Kind.SMOOTHER_LAPLACE:
            raise NotPositiveDefiniteError("A_k is not positive definite")
        return _standard_normal(problem.dim, sigma, kind)
    u = np.asarray(u_ref, dtype=float)
    if kind is Kind.SMOOTHER_THEORY:
        center = u - linalg.solve(A, B, assume_a="pos")
    elif kind is Kind.SMOOTHER_LAPLACE:
        center = u.copy()
    else:
        raise ValueError("use filter_gaussian for the filter kind")
    return GaussianApprox(center, A, sigma, kind)


def filter_gaussian(sm: GaussianApprox, sys, T: float, step: float | None = None,
                    i_max: int = dynamics.DEFAULT_ORDER) -> GaussianApprox:
    """Push a smoother approximation forward by Psi_T."""
    _check_cap(sm.dim)
    if sm.fallback or not sys.in_ball(sm.center):
        return _standard_normal(sm.dim, sm.sigma_z, Kind.FILTER_PUSHFORWARD)
    if T == 0:
        return GaussianApprox(sm.center.copy(), sm.precision_scale.copy(), sm.sigma_z, Kind.FILTER_PUSHFORWARD)
    step = dynamics.default_step(sys, T) if step is None else step
    center = dynamics.flow(sys, sm.center, T, step, i_max)
    J = dynamics.jacobian_flow(sys, sm.center, T, step, i_max)
    try:
        lu = linalg.lu_factor(J, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("flow Jacobian is singular") from exc
    diag = np.abs(np.diag(lu[0]))
    if np.any(diag == 0.0):
        raise NumericalError("flow Jacobian is singular")
    Jinv = linalg.lu_solve(lu, np.eye(sm.dim))
    P = Jinv.T @ sm.precision_scale @ Jinv
    return GaussianApprox(center, 0.5 * (P + P.T), sm.sigma_z, Kind.FILTER_PUSHFORWARD,
                          log_abs_det_jac=float(np.sum(np.log(diag))))
