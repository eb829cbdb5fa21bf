"""Monte-Carlo drivers for the RMSE sweeps.

Trial ``t`` draws its noise from Philox stream ``t`` under the configured
seed, so a trial's result does not depend on which worker runs it. Results
are collected in trial order.
"""

from __future__ import annotations

import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import OptdaError
from ..map_solver import SmoothingProblem, smooth
from ..observation import generate
from .config import ExperimentConfig


@dataclass(frozen=True)
class TrialResult:
    trial: int
    rmse_x0: float
    rmse_map: float
    iterations: int
    converged: bool
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


@dataclass(frozen=True)
class _Job:
    cfg: ExperimentConfig
    sigma_z: float
    h: float
    k: int
    trial: int


def run_trial(cfg: ExperimentConfig, sigma_z: float, h: float, k: int, trial: int) -> TrialResult:
    sys = cfg.system()
    setup = cfg.setup(sigma_z=sigma_z, h=h, k=k)
    u0 = cfg.u0()
    try:
        rec = generate(sys, setup, u0, cfg.seed, cfg.step, cfg.taylor_order, stream=trial)
        prob = SmoothingProblem(sys, setup, rec, cfg.step, cfg.taylor_order)
        rep = smooth(prob, cfg.smooth_config(), truth=u0)
    except (OptdaError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return TrialResult(trial, math.nan, math.nan, 0, False, f"{type(exc).__name__}: {exc}")
    return TrialResult(trial, rep.rmse_x0, rep.rmse_vs_truth, rep.trace.iterations, rep.converged)


def _run_job(job: _Job) -> TrialResult:
    return run_trial(job.cfg, job.sigma_z, job.h, job.k, job.trial)


def run_jobs(jobs: list, n_workers: int = 1) -> list:
    """Evaluate trials serially or on a process pool; order follows ``jobs``."""
    if n_workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_run_job, jobs, chunksize=1))


@dataclass(frozen=True)
class Summary:
    rmse_x0: float
    rmse_map: float
    stderr: float
    fail_frac: float
    mean_iters: float
    n_ok: int


def summarize(results: list) -> Summary:
    """Root-mean-square over trials; stderr of the RMSE by the delta method."""
    ok = [r for r in results if r.ok]
    n = len(results)
    failed = sum(1 for r in results if not (r.ok and r.converged))
    if not ok:
        return Summary(math.nan, math.nan, math.nan, failed / n, math.nan, 0)
    e0 = np.array([r.rmse_x0 ** 2 for r in ok])
    em = np.array([r.rmse_map ** 2 for r in ok])
    rm = math.sqrt(em.mean())
    se = float(em.std(ddof=1) / math.sqrt(len(em)) / (2 * rm)) if len(em) > 1 and rm > 0 else math.nan
    return Summary(math.sqrt(e0.mean()), rm, se, failed / n,
                   float(np.mean([r.iterations for r in ok])), len(ok))


def _csv(header: list, rows: list) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    if rows:
        np.savetxt(buf, np.asarray(rows, dtype=float), fmt="%.17g", delimiter=",")
    return buf.getvalue()


@dataclass
class SweepResult:
    rows: list
    header: list
    trials: list
    slope: float | None = None

    def to_csv(self) -> str:
        return _csv(self.header, self.rows)

    def summary_json(self) -> str:
        out = {"header": self.header, "rows": [[float(x) for x in r] for r in self.rows]}
        if self.slope is not None:
            out["slope"] = float(self.slope)
        out["failures"] = [asdict(t) for group in self.trials for t in group if not (t.ok and t.converged)]
        return json.dumps(out, indent=2)


RMSE_K_HEADER = ["k", "rmse_x0", "rmse_map", "stderr", "fail_frac", "mean_iters"]
RMSE_NOISE_HEADER = ["sigma_z", "h", "k", "rmse_map", "stderr", "fail_frac", "mean_iters"]


def rmse_vs_k(cfg: ExperimentConfig, n_workers: int = 1) -> SweepResult:
    jobs = [_Job(cfg, cfg.sigma_z, cfg.h, k, t) for k in cfg.k_list for t in range(cfg.trials)]
    res = run_jobs(jobs, n_workers)
    groups = [res[i * cfg.trials:(i + 1) * cfg.trials] for i in range(len(cfg.k_list))]
    rows = []
    for k, g in zip(cfg.k_list, groups):
        s = summarize(g)
        rows.append([k, s.rmse_x0, s.rmse_map, s.stderr, s.fail_frac, s.mean_iters])
    return SweepResult(rows, RMSE_K_HEADER, groups)


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x over positive finite pairs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    if m.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[m]), np.log(y[m]), 1)[0])


def rmse_vs_noise(cfg: ExperimentConfig, n_workers: int = 1) -> SweepResult:
    grid = [(s, h, int(round(cfg.T / h))) for h in cfg.h_list for s in cfg.sigma_list]
    jobs = [_Job(cfg, s, h, k, t) for (s, h, k) in grid for t in range(cfg.trials)]
    res = run_jobs(jobs, n_workers)
    groups = [res[i * cfg.trials:(i + 1) * cfg.trials] for i in range(len(grid))]
    rows = []
    for (s, h, k), g in zip(grid, groups):
        su = summarize(g)
        rows.append([s, h, k, su.rmse_map, su.stderr, su.fail_frac, su.mean_iters])
    scale = [r[0] * math.sqrt(r[1]) for r in rows]
    slope = loglog_slope(scale, [r[3] for r in rows])
    return SweepResult(rows, RMSE_NOISE_HEADER, groups, slope)
