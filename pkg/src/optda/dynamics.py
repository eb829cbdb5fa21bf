"""Bilinear ODE systems du/dt = -A u - B(u, u) + f and their Taylor-series flow.

The flow is advanced by truncated Taylor series whose coefficients come from
the exact derivative recursion of the vector field, followed by a projection
onto the trapping ball after every step. Tangent and adjoint products
differentiate the *discrete* stepping map, so the two are exact transposes of
each other up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels as K
from .errors import (
    InvalidDimensionError,
    NotInvertibleError,
    OutOfBallError,
    StepTooLargeError,
)

DEFAULT_ORDER = 12
BACKWARD_ORDER = 20
MAX_ORDER = 30
STEP_FRACTION = 0.25
BACKWARD_FRACTION = 0.9
# relative slack when testing membership of B_R
BALL_RTOL = 1e-12


@dataclass(frozen=True)
class SystemConstants:
    """Deterministic bounds derived from ||A||, ||B||, ||f|| and R."""

    C0: float
    C_der: float
    G: float
    v_max: float
    a_max: float
    norm_A: float
    norm_B: float
    R: float

    @property
    def max_step(self) -> float:
        """1 / C_der, the radius inside which single Taylor series are controlled."""
        return 1.0 / self.C_der if self.C_der > 0 else math.inf

    def C_J(self, k: int) -> float:
        return 2.0**k * (self.C_der + self.norm_B)

    def D_J(self, k: int) -> float:
        return 2.0**k * (self.norm_A + self.norm_B + 2.0 * self.norm_B * self.R)


@dataclass(frozen=True, eq=False)
class BilinearSystem:
    """The triple (A, B, f) together with a trapping radius R.

    Parameters
    ----------
    A : ndarray
        Either a (d, d) matrix or a length-d vector holding a diagonal.
    b_index : ndarray of int, shape (nnz, 3)
        Rows ``(i, j, out)``; together with ``b_coeff`` they encode
        ``B(u, v)[out] += coeff * u[i] * v[j]``.
    b_coeff : ndarray, shape (nnz,)
    f : ndarray, shape (d,)
    R : float
        Trapping radius.
    b_norm : float, optional
        ``sup ||B(u, v)||`` over unit u, v. When omitted the Frobenius norm of
        the coefficient tensor is used, which is an upper bound.
    """

    A: np.ndarray
    b_index: np.ndarray
    b_coeff: np.ndarray
    f: np.ndarray
    R: float
    b_norm: float | None = None
    name: str = field(default="bilinear")

    def __post_init__(self):
        d = self.f.shape[0]
        if self.A.shape not in ((d,), (d, d)):
            raise InvalidDimensionError(f"A has shape {self.A.shape}, expected ({d},) or ({d}, {d})")
        idx = np.asarray(self.b_index, dtype=np.int64).reshape(-1, 3)
        if idx.size and (idx.min() < 0 or idx.max() >= d):
            raise InvalidDimensionError("bilinear entry index outside [0, d)")
        if self.R <= 0:
            raise ValueError("trapping radius must be positive")
        object.__setattr__(self, "b_index", idx)
        object.__setattr__(self, "b_coeff", np.asarray(self.b_coeff, dtype=float).reshape(-1))
        object.__setattr__(self, "f", np.asarray(self.f, dtype=float))
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        for arr in (self.A, self.b_index, self.b_coeff, self.f):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.f.shape[0]

    @cached_property
    def _a_coo(self):
        if self.A.ndim == 1:
            rows = np.nonzero(self.A)[0].astype(np.int64)
            return rows, rows.copy(), self.A[rows].copy()
        rows, cols = np.nonzero(self.A)
        return rows.astype(np.int64), cols.astype(np.int64), self.A[rows, cols].copy()

    @cached_property
    def _folded(self):
        acc: dict[tuple[int, int, int], float] = {}
        for (i, j, o), c in zip(self.b_index.tolist(), self.b_coeff.tolist()):
            key = (min(i, j), max(i, j), o)
            acc[key] = acc.get(key, 0.0) + c
        keys = sorted((k for k, s in acc.items() if s != 0.0), key=lambda k: (k[2], k[0], k[1]))
        fp = np.array([k[0] for k in keys], dtype=np.int64)
        fq = np.array([k[1] for k in keys], dtype=np.int64)
        fo = np.array([k[2] for k in keys], dtype=np.int64)
        fs = np.array([acc[k] for k in keys], dtype=float)
        return fp, fq, fo, fs

    @cached_property
    def kargs(self) -> tuple:
        """System arrays in the positional order the compiled kernels expect."""
        ar, ac, av = self._a_coo
        fp, fq, fo, fs = self._folded
        return (ar, ac, av, fp, fq, fo, fs, self.f.copy(), float(self.R))

    @cached_property
    def norm_A(self) -> float:
        if self.A.ndim == 1:
            return float(np.max(np.abs(self.A))) if self.A.size else 0.0
        return float(np.linalg.norm(self.A, 2))

    @cached_property
    def norm_B(self) -> float:
        if self.b_norm is not None:
            return float(self.b_norm)
        d = self.dim
        dense = {}
        for (i, j, o), c in zip(self.b_index.tolist(), self.b_coeff.tolist()):
            dense[(i, j, o)] = dense.get((i, j, o), 0.0) + c
        return float(math.sqrt(sum(c * c for c in dense.values()))) if d else 0.0

    @cached_property
    def constants(self) -> SystemConstants:
        nA, nB, nf, R = self.norm_A, self.norm_B, float(np.linalg.norm(self.f)), float(self.R)
        if nA == 0.0:
            # the bounds divide by ||A||; only the forcing-free case stays finite
            ratio = 0.0 if nf == 0.0 else math.inf
        else:
            ratio = nf / nA
        C0 = R + ratio
        C_der = nA + nB * R + nB * ratio
        G = nA + 2.0 * nB * R
        return SystemConstants(
            C0=C0, C_der=C_der, G=G,
            v_max=nA * R + nB * R * R + nf,
            a_max=nA + 2.0 * nB * R,
            norm_A=nA, norm_B=nB, R=R,
        )

    def apply_A(self, v):
        if self.A.ndim == 1:
            return self.A[:, None] * v if v.ndim == 2 else self.A * v
        return self.A @ v

    def B(self, u, v):
        """Evaluate the bilinear form on two vectors."""
        i, j, o = self.b_index.T
        return np.bincount(o, weights=self.b_coeff * u[i] * v[j], minlength=self.dim)

    def rhs(self, v):
        v = np.asarray(v, dtype=float)
        return -self.apply_A(v) - self.B(v, v) + self.f

    def in_ball(self, v) -> bool:
        return float(np.linalg.norm(v)) <= self.R * (1.0 + BALL_RTOL)

    def project(self, v):
        """Projection onto the closed ball of radius R."""
        n = float(np.linalg.norm(v))
        return v * (self.R / n) if n > self.R else np.array(v, dtype=float)


def lorenz96(d: int, f: float = 8.0) -> BilinearSystem:
    """Lorenz 96 model du_i/dt = u_{i-1}(u_{i+1} - u_{i-2}) - u_i + f.

    A is the identity, the symmetric bilinear part has four entries per row,
    and R = ||f 1|| is the trapping radius from the absorbing-set argument.
    """
    if d < 4:
        raise InvalidDimensionError(f"Lorenz 96 needs d >= 4, got {d}")
    rows = []
    coeffs = []
    for i in range(d):
        im1, im2, ip1 = (i - 1) % d, (i - 2) % d, (i + 1) % d
        rows += [(im1, ip1, i), (ip1, im1, i), (im1, im2, i), (im2, im1, i)]
        coeffs += [-0.5, -0.5, 0.5, 0.5]
    forcing = np.full(d, float(f))
    # sup ||B(u, v)|| over unit vectors is 2 for even d and at most 2 otherwise
    return BilinearSystem(
        A=np.ones(d), b_index=np.array(rows), b_coeff=np.array(coeffs),
        f=forcing, R=float(np.linalg.norm(forcing)), b_norm=2.0, name=f"lorenz96(d={d}, f={f:g})",
    )


def _check_ball(sys: BilinearSystem, v):
    if not sys.in_ball(v):
        raise OutOfBallError(f"||v|| = {np.linalg.norm(v):.6g} exceeds R = {sys.R:.6g}")


def _check_order(i_max: int):
    if i_max < 0:
        raise ValueError("order must be non-negative")
    if i_max > MAX_ORDER:
        raise OverflowError(f"Taylor order {i_max} above the supported maximum {MAX_ORDER}")


def _as_vec(v):
    return np.ascontiguousarray(v, dtype=float)


def default_step(sys: BilinearSystem, h: float | None = None) -> float:
    base = STEP_FRACTION * sys.constants.max_step
    if h is None:
        if math.isinf(base):
            raise ValueError("system has no step limit; pass the step explicitly")
        return base
    return min(h, base)


def step_schedule(t: float, step: float) -> np.ndarray:
    """Full steps of size ``step`` followed by the remainder ``t mod step``."""
    if t < 0:
        raise ValueError("time must be non-negative")
    if t == 0:
        return np.zeros(0)
    n = int(math.floor(t / step))
    rem = t - n * step
    sizes = [step] * n
    if rem > 1e-15 * max(t, 1.0):
        sizes.append(rem)
    return np.array(sizes, dtype=float)


def _check_step(sys: BilinearSystem, step: float):
    if not 0 < step < sys.constants.max_step:
        raise StepTooLargeError(
            f"step {step:.3g} must lie in (0, 1/C_der = {sys.constants.max_step:.3g})"
        )


def derivative_series(sys: BilinearSystem, v, i_max: int) -> list[np.ndarray]:
    """Time derivatives D^0 v, ..., D^{i_max} v of the solution at t = 0."""
    _check_order(i_max)
    v = _as_vec(v)
    _check_ball(sys, v)
    a = K.series(v, i_max, *sys.kargs[:-1])
    return [a[i] * math.factorial(i) for i in range(i_max + 1)]


def taylor_coefficients(sys: BilinearSystem, v, i_max: int) -> np.ndarray:
    """Normalized coefficients D^i v / i! as an (i_max+1, d) array (no ball check)."""
    _check_order(i_max)
    return K.series(_as_vec(v), i_max, *sys.kargs[:-1])


def taylor_remainder_bound(sys: BilinearSystem, t: float, i_max: int) -> float:
    c = sys.constants
    return c.C0 * (c.C_der * t) ** (i_max + 1)


def taylor_step(sys: BilinearSystem, v, t: float, i_max: int = DEFAULT_ORDER):
    """Truncated Taylor sum sum_{i <= i_max} t^i D^i v / i! (no projection)."""
    _check_order(i_max)
    v = _as_vec(v)
    _check_ball(sys, v)
    if t < 0:
        raise ValueError("time must be non-negative")
    if t >= sys.constants.max_step:
        raise StepTooLargeError(f"t = {t:.3g} >= 1/C_der = {sys.constants.max_step:.3g}")
    return K.step(v, float(t), i_max, False, *sys.kargs)


def flow_error_bound(sys: BilinearSystem, t: float, step: float, i_max: int) -> float:
    c = sys.constants
    return (t + step) * math.exp(c.G * t) * c.C0 * c.C_der * (c.C_der * step) ** i_max


def flow(sys: BilinearSystem, v, t: float, step: float | None = None, i_max: int = DEFAULT_ORDER):
    """Approximate Psi_t(v) by projected Taylor steps."""
    _check_order(i_max)
    v = _as_vec(v)
    _check_ball(sys, v)
    step = default_step(sys) if step is None else step
    _check_step(sys, step)
    dts = step_schedule(t, step)
    return K.propagate(v, dts, i_max, *sys.kargs)


def backward_truncation_bound(sys: BilinearSystem, t: float, i_max: int) -> float:
    c = sys.constants
    x = c.C_der * t
    return c.C0 * x ** (i_max + 1) / (1.0 - x)


def flow_backward(sys: BilinearSystem, v, t: float, i_max: int = BACKWARD_ORDER):
    """Psi_{-t}(v) from a single Taylor series evaluated at -t."""
    _check_order(i_max)
    v = _as_vec(v)
    _check_ball(sys, v)
    if t < 0:
        raise ValueError("time must be non-negative")
    limit = BACKWARD_FRACTION * sys.constants.max_step
    if t >= limit:
        raise NotInvertibleError(
            f"backward time {t:.3g} beyond {BACKWARD_FRACTION}/C_der = {limit:.3g}"
        )
    return K.step(v, -float(t), i_max, False, *sys.kargs)


def tangent_flow(sys: BilinearSystem, v, w, t: float, step: float | None = None,
                 i_max: int = DEFAULT_ORDER):
    """J Psi_t(v) w for a vector or a (d, m) block of directions."""
    _check_order(i_max)
    v = _as_vec(v)
    _check_ball(sys, v)
    step = default_step(sys) if step is None else step
    _check_step(sys, step)
    w = np.asarray(w, dtype=float)
    W = np.ascontiguousarray(w.reshape(sys.dim, -1))
    _, TW = K.propagate_tangent(v, W, step_schedule(t, step), i_max, *sys.kargs)
    return TW.reshape(w.shape)


def jacobian_flow(sys: BilinearSystem, v, t: float, step: float | None = None,
                  i_max: int = DEFAULT_ORDER):
    return tangent_flow(sys, v, np.eye(sys.dim), t, step, i_max)


def adjoint_flow(sys: BilinearSystem, v, z, t: float, step: float | None = None,
                 i_max: int = DEFAULT_ORDER):
    """(J Psi_t(v))' z by a reverse sweep over the stored step checkpoints."""
    _check_order(i_max)
    v = _as_vec(v)
    _check_ball(sys, v)
    step = default_step(sys) if step is None else step
    _check_step(sys, step)
    dts = step_schedule(t, step)
    _, ck = K.checkpoints(v, dts, i_max, *sys.kargs)
    return K.adjoint_steps(ck, dts, _as_vec(z), i_max, *sys.kargs)
