"""Linear observation operators, synthetic data and the observed flow H Psi_t.

Noise is drawn from numpy's Philox counter-based generator keyed by
``SeedSequence([seed, stream])``, so a trial is a pure function of its seed.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import dynamics
from .dynamics import BilinearSystem
from .errors import InvalidDimensionError, OutOfBallError


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator for ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True, eq=False)
class ObservationOperator:
    """H as a row selection (``index``) or a dense (d_o, d) matrix."""

    dim: int
    index: np.ndarray | None = None
    matrix: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        if (self.index is None) == (self.matrix is None):
            raise ValueError("give exactly one of index or matrix")
        if self.index is not None:
            idx = np.asarray(self.index, dtype=np.int64)
            if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= self.dim:
                raise InvalidDimensionError("selection index outside [0, d)")
            if np.unique(idx).size != idx.size:
                raise InvalidDimensionError("selection index has repeats")
            object.__setattr__(self, "index", idx)
        else:
            M = np.asarray(self.matrix, dtype=float)
            if M.ndim != 2 or M.shape[1] != self.dim or M.shape[0] > self.dim:
                raise InvalidDimensionError(f"H has shape {M.shape}, need (d_o <= {self.dim}, {self.dim})")
            object.__setattr__(self, "matrix", M)

    @property
    def dim_obs(self) -> int:
        return self.index.size if self.index is not None else self.matrix.shape[0]

    @property
    def norm(self) -> float:
        if self.index is not None:
            return 1.0
        return float(np.linalg.norm(self.matrix, 2))

    def dense(self) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        M = np.zeros((self.dim_obs, self.dim))
        M[np.arange(self.dim_obs), self.index] = 1.0
        return M

    def apply(self, x):
        """H x along the last axis."""
        x = np.asarray(x, dtype=float)
        if self.index is not None:
            return x[..., self.index]
        return x @ self.matrix.T

    def apply_T(self, z):
        """H' z along the last axis."""
        z = np.asarray(z, dtype=float)
        if self.index is not None:
            out = np.zeros(z.shape[:-1] + (self.dim,))
            out[..., self.index] = z
            return out
        return z @ self.matrix

    def apply_cols(self, W):
        """H W for a (d, m) block."""
        if self.index is not None:
            return W[self.index]
        return self.matrix @ W


def identity_operator(d: int) -> ObservationOperator:
    return ObservationOperator(d, index=np.arange(d), name="identity")


def scenario_half_blocks(d: int) -> ObservationOperator:
    """Observe the first three of every six consecutive coordinates."""
    if d <= 0 or d % 6:
        raise InvalidDimensionError(f"half-block scenario needs d divisible by 6, got {d}")
    idx = np.array([6 * b + r for b in range(d // 6) for r in range(3)], dtype=np.int64)
    return ObservationOperator(d, index=idx, name="half_blocks")


def scenario_first3(d: int) -> ObservationOperator:
    """Observe coordinates 0, 1, 2 only."""
    if d < 4:
        raise InvalidDimensionError(f"first-3 scenario needs d >= 4, got {d}")
    return ObservationOperator(d, index=np.arange(3), name="first3")


@dataclass(frozen=True, eq=False)
class ObservationSetup:
    """Operator, noise level, spacing h and number of intervals k (T = k h)."""

    H: ObservationOperator
    sigma_z: float
    h: float
    k: int

    def __post_init__(self):
        if self.sigma_z < 0:
            raise ValueError("sigma_z must be non-negative")
        if self.h <= 0:
            raise ValueError("h must be positive")
        if int(self.k) != self.k or self.k < 0:
            raise ValueError("k must be a non-negative integer")
        object.__setattr__(self, "k", int(self.k))

    @property
    def T(self) -> float:
        return self.k * self.h

    @property
    def dim_obs(self) -> int:
        return self.H.dim_obs

    def times(self) -> np.ndarray:
        return np.arange(self.k + 1) * self.h

    def with_k(self, k: int) -> "ObservationSetup":
        return ObservationSetup(self.H, self.sigma_z, self.h, k)


@dataclass(eq=False)
class ObservationRecord:
    """Observations Y_0..Y_k with the seed that produced them."""

    Y: np.ndarray
    seed: int | None = None
    truth: np.ndarray | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.Y.shape[0] - 1

    def window(self, start: int, k: int) -> "ObservationRecord":
        Y = self.Y[start:start + k + 1]
        if Y.shape[0] != k + 1:
            raise ValueError("window runs past the end of the record")
        truth = None if self.truth is None else self.truth[start:start + k + 1]
        return ObservationRecord(Y.copy(), self.seed, truth)

    def to_csv(self, h: float) -> str:
        d_o = self.Y.shape[1]
        buf = io.StringIO()
        buf.write(",".join(["t"] + [f"y_{i + 1}" for i in range(d_o)]) + "\n")
        t = np.arange(self.Y.shape[0]) * h
        np.savetxt(buf, np.column_stack([t, self.Y]), fmt="%.17g", delimiter=",")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ObservationRecord":
        data = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
        return cls(Y=data[:, 1:].copy())


def substeps(sys: BilinearSystem, h: float, step: float | None = None) -> np.ndarray:
    """Integrator step sizes covering one observation interval."""
    step = dynamics.default_step(sys, h) if step is None else step
    dynamics._check_step(sys, step)
    return dynamics.step_schedule(h, step)


def trajectory(sys: BilinearSystem, setup: ObservationSetup, v, step=None,
               i_max: int = dynamics.DEFAULT_ORDER) -> np.ndarray:
    """States Psi_{t_j}(v), j = 0..k, integrated interval by interval."""
    v = np.ascontiguousarray(v, dtype=float)
    dynamics._check_ball(sys, v)
    X, _ = K.forward_obs(v, setup.k, substeps(sys, setup.h, step), i_max, *sys.kargs)
    return X


def generate(sys: BilinearSystem, setup: ObservationSetup, u0, seed: int,
             step=None, i_max: int = dynamics.DEFAULT_ORDER, stream: int = 0) -> ObservationRecord:
    """Y_j = H Psi_{t_j}(u0) + Z_j with Z_j ~ N(0, sigma_z^2 I)."""
    u0 = np.asarray(u0, dtype=float)
    if u0.shape != (sys.dim,):
        raise InvalidDimensionError(f"u0 has shape {u0.shape}, expected ({sys.dim},)")
    if not sys.in_ball(u0):
        raise OutOfBallError(f"||u0|| = {np.linalg.norm(u0):.6g} exceeds R = {sys.R:.6g}")
    X = trajectory(sys, setup, u0, step, i_max)
    Y = setup.H.apply(X)
    if setup.sigma_z > 0:
        Y = Y + setup.sigma_z * rng_for(seed, stream).standard_normal(Y.shape)
    return ObservationRecord(Y=Y, seed=int(seed), truth=X)


def observed_flow(sys: BilinearSystem, setup: ObservationSetup, v, t: float, step=None,
                  i_max: int = dynamics.DEFAULT_ORDER):
    """Phi_t(v) = H Psi_t(v)."""
    if t == 0:
        dynamics._check_ball(sys, np.asarray(v, dtype=float))
        return setup.H.apply(v)
    step = dynamics.default_step(sys, setup.h) if step is None else step
    return setup.H.apply(dynamics.flow(sys, v, t, step, i_max))


def observed_tangent(sys, setup, v, w, t, step=None, i_max=dynamics.DEFAULT_ORDER):
    step = dynamics.default_step(sys, setup.h) if step is None else step
    if t == 0:
        dynamics._check_ball(sys, np.asarray(v, dtype=float))
        return setup.H.apply_cols(np.asarray(w, dtype=float).reshape(sys.dim, -1)).reshape(
            (setup.dim_obs,) + np.shape(w)[1:])
    TW = dynamics.tangent_flow(sys, v, w, t, step, i_max)
    W = TW.reshape(sys.dim, -1)
    return setup.H.apply_cols(W).reshape((setup.dim_obs,) + np.shape(w)[1:])


def observed_adjoint(sys, setup, v, z, t, step=None, i_max=dynamics.DEFAULT_ORDER):
    step = dynamics.default_step(sys, setup.h) if step is None else step
    zt = setup.H.apply_T(z)
    if t == 0:
        dynamics._check_ball(sys, np.asarray(v, dtype=float))
        return zt
    return dynamics.adjoint_flow(sys, v, zt, t, step, i_max)

