"""Fast invariant checks for every module, run by the ``selftest`` command."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Callable

import numpy as np

from .. import deriv_est, dynamics, init_est, oracle
from ..dynamics import lorenz96
from ..gaussian_approx import Kind, assemble_AkBk, smoother_gaussian
from ..map_solver import SmoothingProblem, gradient
from ..observation import ObservationSetup, generate, identity_operator, rng_for, scenario_half_blocks

TABLE_RESOURCE = "deriv_coefficients.json"


@dataclass
class Check:
    module: str
    name: str
    ok: bool
    detail: str = ""


@dataclass
class SelftestResult:
    checks: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def counts(self) -> dict:
        out: dict = {}
        for c in self.checks:
            p, t = out.get(c.module, (0, 0))
            out[c.module] = (p + int(c.ok), t + 1)
        return out

    def report(self) -> str:
        lines = [f"{m:16s} {p}/{t} passed" for m, (p, t) in self.counts().items()]
        lines += [f"FAIL {c.module}.{c.name}: {c.detail}" for c in self.checks if not c.ok]
        lines.append("PASS" if self.ok else "FAIL")
        return "\n".join(lines)


def _ball_point(rng, d: int, radius: float) -> np.ndarray:
    g = rng.standard_normal(d)
    return radius * rng.uniform() ** (1.0 / d) * g / np.linalg.norm(g)


# dynamics

def check_energy(rng) -> tuple[bool, str]:
    worst = 0.0
    for s in (lorenz96(12), lorenz96(18), oracle.toy2d()):
        for _ in range(5):
            v = _ball_point(rng, s.dim, s.R)
            scale = s.norm_B * np.linalg.norm(v) ** 3
            worst = max(worst, abs(s.B(v, v) @ v) / scale)
    return worst <= 1e-13, f"max relative <B(v,v),v> = {worst:.2e}"


def check_taylor_remainder(rng) -> tuple[bool, str]:
    s = lorenz96(12)
    c = s.constants
    worst = 0.0
    ref_order = dynamics.MAX_ORDER
    for frac in (0.1, 0.3, 0.5):
        t = frac * c.max_step
        v = _ball_point(rng, s.dim, 0.9 * s.R)
        ref = dynamics.taylor_step(s, v, t, ref_order)
        for i in (2, 4, 8):
            err = np.linalg.norm(dynamics.taylor_step(s, v, t, i) - ref)
            tol = dynamics.taylor_remainder_bound(s, t, i) + dynamics.taylor_remainder_bound(s, t, ref_order) + 1e-12
            worst = max(worst, err / tol)
    return worst <= 1.0, f"max error / bound = {worst:.3g}"


def check_gronwall(rng) -> tuple[bool, str]:
    s = lorenz96(12)
    G = s.constants.G
    bad = 0
    for t in (0.01, 0.05):
        for _ in range(4):
            v = _ball_point(rng, s.dim, 0.8 * s.R)
            w = s.project(v + 1e-2 * rng.standard_normal(s.dim))
            d0 = np.linalg.norm(v - w)
            dt = np.linalg.norm(dynamics.flow(s, v, t) - dynamics.flow(s, w, t))
            if not (math.exp(-G * t) * d0 * (1 - 1e-10) <= dt <= math.exp(G * t) * d0 * (1 + 1e-10)):
                bad += 1
    return bad == 0, f"{bad} pairs outside the Gronwall sandwich"


def check_backward_roundtrip(rng) -> tuple[bool, str]:
    s = lorenz96(12)
    c = s.constants
    worst = 0.0
    for frac in (0.1, 0.4, 0.8):
        t = frac * c.max_step
        v = _ball_point(rng, s.dim, 0.3 * s.R)
        back = dynamics.flow_backward(s, v, t)
        if not s.in_ball(back):
            continue
        step = dynamics.default_step(s, t)
        err = np.linalg.norm(dynamics.flow(s, back, t, step) - v)
        # floor for double rounding on states of size C0
        tol = 2.0 * (dynamics.backward_truncation_bound(s, t, dynamics.BACKWARD_ORDER)
                     + dynamics.flow_error_bound(s, t, step, dynamics.DEFAULT_ORDER)) + 1e3 * np.finfo(float).eps * c.C0
        worst = max(worst, err / tol)
    return worst <= 1.0, f"max error / bound = {worst:.3g}"


def check_transpose(rng) -> tuple[bool, str]:
    s = lorenz96(12)
    worst = 0.0
    for t in (0.01, 0.1):
        v = _ball_point(rng, s.dim, 0.8 * s.R)
        w, z = rng.standard_normal(s.dim), rng.standard_normal(s.dim)
        lhs = dynamics.tangent_flow(s, v, w, t) @ z
        rhs = w @ dynamics.adjoint_flow(s, v, z, t)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-300))
    return worst <= 1e-10, f"max relative mismatch = {worst:.2e}"


# map_solver

def _small_problem(sigma: float = 1e-3, k: int = 20, seed: int = 3):
    s = lorenz96(12)
    setup = ObservationSetup(scenario_half_blocks(12), sigma, 1e-2, k)
    u0 = (13 + np.arange(12)) / 24.0
    return SmoothingProblem(s, setup, generate(s, setup, u0, seed)), u0


def check_gradient(rng) -> tuple[bool, str]:
    prob, u0 = _small_problem()
    v = u0 + 1e-2 * rng.standard_normal(12)
    ga = gradient(prob, v, "adjoint")
    gf = gradient(prob, v, "fd")
    rel = np.linalg.norm(ga - gf) / np.linalg.norm(ga)
    return rel <= 1e-5, f"relative difference = {rel:.2e}"


# deriv_est

def check_polynomial_exactness(rng) -> tuple[bool, str]:
    worst = 0.0
    h = 1e-2
    for l, j, kh in ((0, 1, 5), (1, 2, 9), (2, 3, 12), (1, 4, 20), (3, 5, 30)):
        a = rng.standard_normal(j + 1)
        t = np.arange(kh + 1) * h
        y = np.polyval(a[::-1], t)
        c = deriv_est.coefficients(l, j, kh, h).c
        true = math.factorial(l) * a[l]
        # relative to the rounding scale of the weighted sum
        worst = max(worst, abs(c @ y - true) / (np.abs(c).sum() * np.abs(y).max()))
    return worst <= 1e-9, f"max scaled error = {worst:.2e}"


def check_selection(rng) -> tuple[bool, str]:
    s = lorenz96(12)
    mism = []
    for sigma, k in ((1e-3, 50), (1e-6, 40), (1e-2, 100), (1e-9, 30)):
        p = deriv_est.BudgetParams(h=1e-2, sigma_z=sigma, d_o=6, C0=s.constants.C0, C_der=s.constants.C_der)
        for l in (0, 1):
            for j in range(max(l, 1), 4):
                if 2 * j + 3 > k:
                    continue
                got = deriv_est.select_window(l, j, k, p)
                grid = range(2 * j + 3, k + 1)
                want = min(grid, key=lambda kh: deriv_est.error_budget(l, j, kh, p))
                if got != want:
                    mism.append(("window", sigma, k, l, j, got, want))
            cap = min(4, (k - 3) // 2)
            jj, kk = deriv_est.select_degree(l, cap, k, p)
            cand = [(deriv_est.coefficients(l, j, deriv_est.select_window(l, j, k, p), p.h).C_M
                     * deriv_est.error_budget(l, j, deriv_est.select_window(l, j, k, p), p), j)
                    for j in range(l, cap + 1)]
            if jj != min(cand)[1]:
                mism.append(("degree", sigma, k, l, jj, min(cand)[1]))
    return not mism, f"mismatches: {mism[:3]}"


def load_table(path: str | None = None) -> dict:
    if path is None:
        text = resources.files("optda.data").joinpath(TABLE_RESOURCE).read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return json.loads(text)


def check_table(path: str | None = None) -> tuple[bool, str]:
    table = load_table(path)
    worst = 0.0
    for e in table["entries"]:
        want = np.array([float(Fraction(x)) for x in e["c"]])
        got = deriv_est.coefficients(e["l"], e["j_max"], e["k_hat"], e["h"]).c
        if got.shape != want.shape:
            return False, f"entry l={e['l']} j={e['j_max']} has {want.size} weights, expected {got.size}"
        worst = max(worst, float(np.max(np.abs(got - want)) / np.max(np.abs(want))))
    return worst <= 1e-10, f"max relative deviation from stored table = {worst:.2e}"


# init_est

def check_reconstruction(rng) -> tuple[bool, str]:
    worst = 0.0
    for d in (12, 18):
        s = lorenz96(d)
        u = _ball_point(rng, d, 0.5 * s.R) + 2.0
        H = scenario_half_blocks(d)
        x = init_est.reconstruct_halfblocks(H.apply(u), H.apply(s.rhs(u)), s, s.R)
        worst = max(worst, np.linalg.norm(x - u) / np.linalg.norm(u))
    for d in (9, 12):
        s = lorenz96(d)
        u = _ball_point(rng, d, 0.5 * s.R) + 2.0
        j = init_est.first3_depth(d)
        a = dynamics.taylor_coefficients(s, u, j)
        derivs = np.array([math.factorial(i) * a[i][:3] for i in range(j + 1)])
        x = init_est.reconstruct_first3(derivs, s, s.R, d=d)
        worst = max(worst, np.linalg.norm(x - u) / np.linalg.norm(u))
    return worst <= 1e-8, f"max relative round-trip error = {worst:.2e}"


# gaussian_approx

def check_Ak_pd(rng) -> tuple[bool, str]:
    prob, u0 = _small_problem(sigma=1e-4, k=20)
    A, _ = assemble_AkBk(prob, u0)
    ev = float(np.linalg.eigvalsh(A)[0])
    return ev > 0, f"smallest eigenvalue of A_k = {ev:.3e}"


# oracle

def check_conjugate(rng) -> tuple[bool, str]:
    s = oracle.linear_system([[1.0, 0.3], [0.0, 2.0]])
    setup = ObservationSetup(identity_operator(2), 1e-2, 0.1, 5)
    u0 = np.array([0.8, -0.5])
    prob = SmoothingProblem(s, setup, generate(s, setup, u0, 1))
    spec, u_map = oracle.auto_grid(prob, u0, n=101)
    gp = oracle.grid_posterior(prob, spec)
    tv = oracle.tv_distance(gp, smoother_gaussian(prob, Kind.SMOOTHER_THEORY, u0))
    return tv < 1e-6, f"TV on the linear model = {tv:.2e}"


SUITE: list[tuple[str, str, Callable]] = [
    ("dynamics", "energy_conservation", check_energy),
    ("dynamics", "taylor_remainder", check_taylor_remainder),
    ("dynamics", "gronwall_sandwich", check_gronwall),
    ("dynamics", "backward_roundtrip", check_backward_roundtrip),
    ("dynamics", "tangent_adjoint_transpose", check_transpose),
    ("map_solver", "adjoint_gradient_vs_fd", check_gradient),
    ("deriv_est", "polynomial_exactness", check_polynomial_exactness),
    ("deriv_est", "selection_brute_force", check_selection),
    ("init_est", "lorenz96_roundtrip", check_reconstruction),
    ("gaussian_approx", "Ak_positive_definite", check_Ak_pd),
    ("oracle", "conjugate_linear_tv", check_conjugate),
]


def run_selftest(table_path: str | None = None, seed: int = 0) -> SelftestResult:
    t0 = time.perf_counter()
    out = SelftestResult()
    for i, (module, name, fn) in enumerate(SUITE):
        try:
            ok, detail = fn(rng_for(seed, 100 + i))
        except Exception as exc:  # a crash is a failed check, not an aborted suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.checks.append(Check(module, name, bool(ok), detail))
    try:
        ok, detail = check_table(table_path)
    except Exception as exc:
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    out.checks.append(Check("deriv_est", "stored_coefficient_table", bool(ok), detail))
    out.seconds = time.perf_counter() - t0
    return out
