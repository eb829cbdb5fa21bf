"""Command-line front end.

Observation noise comes from numpy's Philox counter-based generator keyed by
(seed, trial), so every output is a pure function of the config and seed and
trials can run on any worker.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from ..errors import OptdaError
from ..map_solver import SmoothingProblem, filter_stream, rmse, smooth
from ..observation import ObservationRecord, generate
from . import experiments, selftest
from .config import ExperimentConfig, load

EXIT_OK = 0
EXIT_NOT_CONVERGED = 2
EXIT_ERROR = 3
EXIT_SELFTEST_FAILED = 1


def _fail(status: str, reason: str, code: int) -> int:
    print(json.dumps({"status": status, "reason": reason}), file=sys.stderr)
    return code


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _sidecar(path: str, suffix: str) -> str:
    p = Path(path)
    return str(p.with_name(p.stem + suffix))


def _csv(header: list, data) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    np.savetxt(buf, np.asarray(data, dtype=float), fmt="%.17g", delimiter=",")
    return buf.getvalue()


def _simulate(cfg: ExperimentConfig, k: int):
    s = cfg.system()
    setup = cfg.setup(k=k)
    rec = generate(s, setup, cfg.u0(), cfg.seed, cfg.step, cfg.taylor_order)
    return s, setup, rec


def cmd_simulate(cfg: ExperimentConfig, out: str | None) -> int:
    """Observation CSV at ``out``; truth with per-time residual norms beside it."""
    k = cfg.n_obs - 1 if cfg.n_obs else cfg.k
    s, setup, rec = _simulate(cfg, k)
    _write(out, rec.to_csv(setup.h))
    if out is not None:
        X = rec.truth
        resid = np.linalg.norm(rec.Y - setup.H.apply(X), axis=1)
        t = setup.times()
        header = ["t"] + [f"u_{i + 1}" for i in range(s.dim)] + ["residual"]
        _write(_sidecar(out, ".truth.csv"), _csv(header, np.column_stack([t, X, resid])))
    return EXIT_OK


def cmd_smooth(cfg: ExperimentConfig, out: str | None, obs: str | None = None) -> int:
    s = cfg.system()
    if obs is not None:
        rec = ObservationRecord.from_csv(Path(obs).read_text(encoding="utf-8"))
        setup = cfg.setup(k=rec.k)
        truth = None
    else:
        s, setup, rec = _simulate(cfg, cfg.k)
        truth = cfg.u0()
    prob = SmoothingProblem(s, setup, rec, cfg.step, cfg.taylor_order)
    rep = smooth(prob, cfg.smooth_config(), truth=truth)
    _write(out, rep.to_json() + "\n")
    if not rep.converged:
        return _fail("not_converged", rep.trace.message or "Newton did not converge", EXIT_NOT_CONVERGED)
    return EXIT_OK


def cmd_filter(cfg: ExperimentConfig, out: str | None) -> int:
    """Per-step CSV at ``out`` and the last refreshed window's report beside it."""
    n = cfg.n_obs or cfg.k + 1 + 10 * cfg.stride
    s, setup, rec = _simulate(cfg, n - 1)
    setup_k = cfg.setup()
    res = filter_stream(s, setup_k, rec.Y, cfg.stride, cfg.smooth_config(), cfg.step, cfg.taylor_order)
    X = rec.truth
    err = [rmse(res.estimates[i], X[i]) if i >= cfg.k else float("nan") for i in range(n)]
    header = ["i", "t", "refreshed", "failed"] + [f"u_{i + 1}" for i in range(s.dim)] + ["rmse"]
    data = np.column_stack([np.arange(n), setup.times(), res.refreshed, res.failed, res.estimates, err])
    _write(out, _csv(header, data))
    report = {"refreshes": int(res.refreshed.sum()), "failures": int(res.failed.sum()), "last": None}
    if res.reports:
        last = max(res.reports)
        report["last_index"] = int(last)
        report["last"] = res.reports[last].to_dict()
    text = json.dumps(report, indent=2) + "\n"
    if out is None:
        sys.stderr.write(text)
    else:
        _write(_sidecar(out, ".json"), text)
    if res.failed.any():
        return _fail("not_converged", f"{int(res.failed.sum())} window solves failed", EXIT_NOT_CONVERGED)
    return EXIT_OK


def _experiment(result: experiments.SweepResult, out: str | None) -> int:
    _write(out, result.to_csv())
    if out is not None:
        _write(_sidecar(out, ".summary.json"), result.summary_json() + "\n")
    if result.slope is not None:
        print(json.dumps({"slope": result.slope}), file=sys.stderr if out is None else sys.stdout)
    return EXIT_OK


def cmd_experiment_rmse_vs_k(cfg: ExperimentConfig, out: str | None, jobs: int = 1) -> int:
    return _experiment(experiments.rmse_vs_k(cfg, jobs), out)


def cmd_experiment_rmse_vs_noise(cfg: ExperimentConfig, out: str | None, jobs: int = 1) -> int:
    return _experiment(experiments.rmse_vs_noise(cfg, jobs), out)


def cmd_selftest(table: str | None = None) -> int:
    t0 = time.perf_counter()
    res = selftest.run_selftest(table)
    print(res.report())
    print(f"elapsed {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    return EXIT_OK if res.ok else EXIT_SELFTEST_FAILED


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="optda",
        description="Optimisation-based smoothing and filtering for bilinear ODEs. "
                    "Noise uses numpy's Philox generator keyed by (seed, trial).",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, jobs=False, stride=False):
        p.add_argument("--config", help="key = value experiment file")
        p.add_argument("--seed", type=int, help="noise seed (overrides the config)")
        p.add_argument("--out", help="output path (stdout if omitted)")
        p.add_argument("--hessian", choices=["dense", "matfree"], help="Hessian mode for Newton")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="worker processes for trials")
        if stride:
            p.add_argument("--stride", type=int, help="refresh the smoother every K steps")
        return p

    common(sub.add_parser("simulate", help="generate a truth trajectory and observations"))
    sm = common(sub.add_parser("smooth", help="MAP estimate of the initial state"))
    sm.add_argument("--obs", help="observation CSV to smooth instead of simulating")
    common(sub.add_parser("filter", help="online estimates over an observation stream"), stride=True)
    common(sub.add_parser("experiment-rmse-vs-k", help="RMSE against window length"), jobs=True)
    common(sub.add_parser("experiment-rmse-vs-noise", help="RMSE against sigma_z sqrt(h)"), jobs=True)
    st = sub.add_parser("selftest", help="fast invariant checks")
    st.add_argument("--table", help="alternative stored coefficient table (JSON)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return cmd_selftest(args.table)
    overrides = {"seed": args.seed, "hessian": args.hessian, "out": args.out,
                 "stride": getattr(args, "stride", None)}
    try:
        cfg = load(args.config, overrides)
        out = cfg.out
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "smooth":
            return cmd_smooth(cfg, out, args.obs)
        if args.command == "filter":
            return cmd_filter(cfg, out)
        jobs = max(1, args.jobs)
        if args.command == "experiment-rmse-vs-k":
            return cmd_experiment_rmse_vs_k(cfg, out, jobs)
        return cmd_experiment_rmse_vs_noise(cfg, out, jobs)
    except OptdaError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_ERROR)
    except OSError as exc:
        return _fail("io_error", str(exc), EXIT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
