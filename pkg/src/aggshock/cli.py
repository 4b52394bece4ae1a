"""Command-line interface.

Subcommands: ``estimate`` (weights, stage fits, tests, confidence set),
``exposures`` (pre-period exposure construction), ``simulate`` (Monte
Carlo over the four designs), ``diagnose`` (representation agreement,
balance quality, conditioning). Exit codes: 0 on success, 2 on data
errors, 3 on numerical errors.

Reports are JSON with sorted keys; apart from the ``timestamp`` field they
are byte-identical across runs and thread counts at a fixed seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import estimate
from .errors import DataError, NumericalError
from .exposures import construct_exposures
from .inference import GridSpec, run_inference
from .panel import AggregateData, default_t0, metadata, read_panel_csv
from .sim import run_monte_carlo, synthetic_spec, calibrate_from_panel, TARGETS
from .tsls import tsls_estimate
from .tsmodel import PsiSpec, build_psi, fit_lambda_model
from .weights import (
    WeightConfig,
    balance_diagnostics,
    solve_weights,
    _constraint_rows,
    _profiled_hessian,
)

THREADS_ENV = "AGGSHOCK_THREADS"


def _auto_or(value: str, kind, what: str):
    if value == "auto":
        return None
    try:
        return kind(value)
    except ValueError:
        raise DataError(f"--{what} must be 'auto' or a {kind.__name__}, got {value!r}") from None


def _jsonable(obj):
    """Recursively convert to plain JSON types; non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path, payload: dict) -> None:
    payload = _jsonable(payload)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve_psi(agg: AggregateData, trend_degree: int, psi_file) -> AggregateData:
    """Constant, polynomial trends, then extra columns from file and panel."""
    extras = []
    if psi_file:
        with open(psi_file, newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:] if rows and any(not _is_float(c) for c in rows[0]) else rows
        mat = np.array([[float(c) for c in row] for row in body], dtype=float)
        if mat.shape[0] != agg.T:
            raise DataError(f"psi file has {mat.shape[0]} rows, panel has {agg.T} periods")
        extras.append(mat)
    if agg.p > 1:
        extras.append(agg.Psi[:, 1:])
    extra = np.hstack(extras) if extras else None
    psi = build_psi(agg.T, PsiSpec(trend_degree=trend_degree, extra=extra))
    return AggregateData(agg.Z, psi)


def _is_float(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def _resolve_exposure(panel, agg, exposure, args, t0: int):
    if getattr(args, "construct_exposures", False):
        return construct_exposures(panel, agg, t0).exposure, "constructed"
    if exposure is None:
        raise DataError(
            "panel file has no 'd' column; pass --construct-exposures or add the column"
        )
    return exposure, "column"


def _load_covariates(path, panel) -> np.ndarray:
    """Covariate file: header ``unit,<name>...``, one row per unit."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "unit" not in rows[0]:
        raise DataError(f"{path}: need a header with a 'unit' column")
    names = [k for k in rows[0] if k != "unit"]
    by_unit = {str(r["unit"]): r for r in rows}
    missing = [u for u in panel.unit_ids if str(u) not in by_unit]
    if missing:
        raise DataError(f"covariate file missing units: {missing[:5]}")
    out = np.array(
        [[float(by_unit[str(u)][name]) for name in names] for u in panel.unit_ids]
    )
    if not np.all(np.isfinite(out)):
        raise DataError("covariate file contains non-finite values")
    return out


def _parse_grid(text: str) -> GridSpec:
    try:
        lo, hi, num = text.split(":")
        return GridSpec(float(lo), float(hi), int(num))
    except ValueError:
        raise DataError(f"--ci-grid must be lo:hi:num, got {text!r}") from None


def _stage_dict(fit) -> dict:
    return {
        "beta": fit.beta,
        "eta_psi": fit.eta_psi,
        "coef_z": fit.coef_z,
    }


def cmd_estimate(args) -> int:
    panel, agg0, exposure = read_panel_csv(args.panel)
    agg = _resolve_psi(agg0, args.trend_degree, args.psi_file)
    t0 = _auto_or(args.t0, int, "t0")
    t0 = default_t0(panel.T) if t0 is None else t0
    exposure, d_source = _resolve_exposure(panel, agg, exposure, args, t0)
    covariates = _load_covariates(args.balance_covariates, panel) if args.balance_covariates else None
    config = WeightConfig(
        zeta=_auto_or(args.zeta, float, "zeta"),
        t0=t0,
        sign_constraint=args.sign_constraint,
        covariate_constraints=covariates,
    )
    result = estimate(panel, exposure, agg, config)
    if "weak_first_stage" in result.flags:
        print("warning: weak first stage, tau is unreliable", file=sys.stderr)
    grid = _parse_grid(args.ci_grid) if args.ci_grid else None
    report = run_inference(
        panel, agg, result, tuple(args.tau0), args.alpha, grid, with_ci=args.ci
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "weights.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "omega"])
        for u, w in zip(panel.unit_ids, result.weights.omega):
            writer.writerow([u, repr(float(w))])
    balance = balance_diagnostics(result.weights)
    with open(out / "balance.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "balance_y", "balance_w"])
        for j in range(result.split.T0):
            writer.writerow(
                [panel.time_ids[j], repr(float(balance.balance_y[j])), repr(float(balance.balance_w[j]))]
            )

    payload = {
        "version": __version__,
        "timestamp": _timestamp(),
        "data": metadata(panel, agg),
        "config": {
            "panel": str(args.panel),
            "t0": result.split.T0,
            "zeta": result.weights.zeta,
            "trend_degree": args.trend_degree,
            "alpha": args.alpha,
            "tau0": list(args.tau0),
            "ci": args.ci,
            "sign_constraint": args.sign_constraint,
            "balance_covariates": str(args.balance_covariates) if args.balance_covariates else None,
            "d_source": d_source,
        },
        "estimate": {
            "delta": result.delta,
            "pi": result.pi,
            "tau": result.tau,
            "flags": list(result.flags),
            "fit_y": _stage_dict(result.fit_y),
            "fit_w": _stage_dict(result.fit_w),
        },
        "balance": {
            "rms_y": balance.rms_y,
            "rms_w": balance.rms_w,
            "benchmark_rms_y": balance.benchmark_rms_y,
            "benchmark_rms_w": balance.benchmark_rms_w,
            "ratio_y": balance.ratio_y,
            "ratio_w": balance.ratio_w,
        },
        "inference": {
            "sigma": report.variance.sigma,
            "rho_hat": report.variance.rho_hat,
            "tests": [asdict(t) for t in report.tests],
            "confidence_set": None
            if report.confidence is None
            else {
                "alpha": report.confidence.alpha,
                "grid": asdict(report.confidence.grid),
                "intervals": [list(iv) for iv in report.confidence.intervals],
                "empty": report.confidence.empty,
                "unbounded_below": report.confidence.unbounded_below,
                "unbounded_above": report.confidence.unbounded_above,
            },
        },
        "weights_file": "weights.csv",
        "balance_file": "balance.csv",
    }
    _write_json(out / "estimate.json", payload)
    print(f"delta={result.delta:.6g} pi={result.pi:.6g} tau={result.tau:.6g}")
    print(f"wrote {out / 'estimate.json'}")
    return 0


def cmd_exposures(args) -> int:
    panel, agg0, _ = read_panel_csv(args.panel)
    agg = _resolve_psi(agg0, args.trend_degree, args.psi_file)
    t0 = _auto_or(args.t0, int, "t0")
    t0 = default_t0(panel.T) if t0 is None else t0
    fit = construct_exposures(panel, agg, t0)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "d", "se", "r2"])
        for i, u in enumerate(panel.unit_ids):
            writer.writerow(
                [u, repr(float(fit.exposure.D[i])), repr(float(fit.per_unit_se[i])), repr(float(fit.r2[i]))]
            )
    print(f"wrote {args.out}")
    return 0


def cmd_simulate(args) -> int:
    threads = args.threads
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else 1
    if args.synthetic:
        try:
            n, T = (int(tok) for tok in args.synthetic.split(","))
        except ValueError:
            raise DataError(f"--synthetic must be n,T, got {args.synthetic!r}") from None
        spec = synthetic_spec(n, T, seed=args.seed)
        source = {"kind": "synthetic", "n": n, "T": T}
        exposure = None
    else:
        panel, agg, _ = read_panel_csv(args.calibrate)
        spec = calibrate_from_panel(panel, agg, rank=args.rank, seed=args.seed)
        source = {"kind": "calibrated", "path": str(args.calibrate), "rank": args.rank}
        # D for the simulated estimators comes from the observed panel's
        # first third, frozen across replications like the panel itself.
        exposure = construct_exposures(panel, agg, default_t0(panel.T)).exposure
    report = run_monte_carlo(
        spec,
        args.design,
        args.reps,
        seed=args.seed,
        tau0=args.tau0,
        alpha=args.alpha,
        threads=threads,
        keep_errors=bool(args.dump_errors),
        exposure=exposure,
    )
    if args.dump_errors:
        with open(args.dump_errors, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rep", "estimator"] + [f"{t}_error" for t in TARGETS])
            for est, mat in report.errors.items():
                for r in range(mat.shape[0]):
                    row = [r, est] + [
                        repr(float(v)) if np.isfinite(v) else "" for v in mat[r]
                    ]
                    writer.writerow(row)
    payload = {
        "version": __version__,
        "timestamp": _timestamp(),
        "config": {
            "design": report.design,
            "reps": report.reps,
            "seed": report.seed,
            "source": source,
            "tau0": report.tau0,
            "alpha": report.alpha,
        },
        "tau": report.tau,
        "failures": report.failures,
        "cells": {
            est: {t: asdict(stats) for t, stats in cells.items()}
            for est, cells in report.cells.items()
        },
        "rejection_rate": report.rejection_rate,
    }
    _write_json(args.out, payload)
    print(f"design {report.design}, {report.reps} reps, {report.failures} failures")
    header = f"{'estimator':<10}" + "".join(f"{t + ' rmse':>12}{t + ' bias':>12}" for t in TARGETS)
    print(header)
    for est, cells in report.cells.items():
        line = f"{est:<10}" + "".join(
            f"{cells[t].rmse:>12.4f}{cells[t].bias:>12.4f}" for t in TARGETS
        )
        print(line)
    if report.rejection_rate is not None:
        print(f"rejection rate at tau0={report.tau0}: {report.rejection_rate:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_diagnose(args) -> int:
    panel, agg0, exposure = read_panel_csv(args.panel)
    agg = _resolve_psi(agg0, args.trend_degree, args.psi_file)
    t0 = _auto_or(args.t0, int, "t0")
    t0 = default_t0(panel.T) if t0 is None else t0
    exposure, d_source = _resolve_exposure(panel, agg, exposure, args, t0)
    config = WeightConfig(zeta=_auto_or(args.zeta, float, "zeta"), t0=t0)
    result = estimate(panel, exposure, agg, config)
    ts = tsls_estimate(panel, exposure, agg.Z)

    def rel(a: float, b: float) -> float:
        return abs(a - b) / max(abs(a), abs(b), 1e-12)

    balance = balance_diagnostics(result.weights)
    lam = fit_lambda_model(agg, result.split)
    Q, _, _, X, _, _ = _profiled_hessian(panel, agg, result.split.T0, result.weights.zeta)
    E, _ = _constraint_rows(panel, exposure, config)
    kkt = np.zeros((panel.n + E.shape[0],) * 2)
    kkt[: panel.n, : panel.n] = 2.0 * Q
    kkt[: panel.n, panel.n :] = E.T
    kkt[panel.n :, : panel.n] = E
    post = np.arange(result.split.T0, panel.T)
    payload = {
        "version": __version__,
        "timestamp": _timestamp(),
        "data": metadata(panel, agg),
        "config": {
            "panel": str(args.panel),
            "t0": result.split.T0,
            "zeta": result.weights.zeta,
            "trend_degree": args.trend_degree,
            "d_source": d_source,
        },
        "representation_agreement": {
            "delta_fe": ts.delta_fe,
            "delta_ts": ts.delta_ts,
            "pi_fe": ts.pi_fe,
            "pi_ts": ts.pi_ts,
            "max_rel_discrepancy": max(rel(ts.delta_fe, ts.delta_ts), rel(ts.pi_fe, ts.pi_ts)),
        },
        "balance": {
            "rms_y": balance.rms_y,
            "rms_w": balance.rms_w,
            "benchmark_rms_y": balance.benchmark_rms_y,
            "benchmark_rms_w": balance.benchmark_rms_w,
            "ratio_y": balance.ratio_y,
            "ratio_w": balance.ratio_w,
        },
        "serial_model": {"rho_hat": lam.rho_hat},
        "conditioning": {
            "kkt": float(np.linalg.cond(kkt)),
            "design_pre": float(np.linalg.cond(X)),
            "design_post": float(np.linalg.cond(np.column_stack([agg.Psi[post], agg.Z[post]]))),
        },
        "estimate": {"delta": result.delta, "pi": result.pi, "tau": result.tau},
    }
    _write_json(args.out, payload)
    print(f"wrote {args.out}")
    return 0


def _add_psi_flags(sub) -> None:
    sub.add_argument("--trend-degree", type=int, default=0, help="polynomial trend degree")
    sub.add_argument("--psi-file", default=None, help="CSV of extra deterministic columns")


def _add_exposure_flags(sub) -> None:
    group = sub.add_mutually_exclusive_group()
    group.add_argument(
        "--d-col", action="store_true", help="use the d column from the panel file (default)"
    )
    group.add_argument(
        "--construct-exposures",
        action="store_true",
        help="estimate exposures from pre-period regressions",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aggshock", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="weights, stage fits, and inference")
    est.add_argument("--panel", required=True)
    est.add_argument("--t0", default="auto")
    est.add_argument("--zeta", default="auto")
    est.add_argument("--alpha", type=float, default=0.05)
    est.add_argument("--tau0", type=float, action="append", default=[])
    est.add_argument("--ci", action="store_true", help="invert the test into a confidence set")
    est.add_argument("--ci-grid", default=None, help="lo:hi:num")
    est.add_argument("--sign-constraint", action="store_true")
    est.add_argument("--balance-covariates", default=None)
    est.add_argument("--out", required=True)
    _add_psi_flags(est)
    _add_exposure_flags(est)
    est.set_defaults(func=cmd_estimate)

    exp = sub.add_parser("exposures", help="construct pre-period exposures")
    exp.add_argument("--panel", required=True)
    exp.add_argument("--t0", default="auto")
    exp.add_argument("--out", required=True)
    _add_psi_flags(exp)
    exp.set_defaults(func=cmd_exposures)

    simp = sub.add_parser("simulate", help="Monte Carlo over the four designs")
    simp.add_argument("--design", type=int, choices=(1, 2, 3, 4), required=True)
    simp.add_argument("--reps", type=int, required=True)
    simp.add_argument("--seed", type=int, default=0)
    src = simp.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", default=None, help="n,T")
    src.add_argument("--calibrate", default=None, help="panel CSV to calibrate from")
    simp.add_argument("--rank", type=int, default=11, help="factor rank for calibration")
    simp.add_argument("--tau0", type=float, default=None)
    simp.add_argument("--alpha", type=float, default=0.05)
    simp.add_argument("--threads", type=int, default=None, help=f"default ${THREADS_ENV} or 1")
    simp.add_argument("--dump-errors", default=None, help="per-replication error CSV")
    simp.add_argument("--out", required=True)
    simp.set_defaults(func=cmd_simulate)

    diag = sub.add_parser("diagnose", help="representation agreement and conditioning")
    diag.add_argument("--panel", required=True)
    diag.add_argument("--t0", default="auto")
    diag.add_argument("--zeta", default="auto")
    diag.add_argument("--out", required=True)
    _add_psi_flags(diag)
    _add_exposure_flags(diag)
    diag.set_defaults(func=cmd_diagnose)
    return parser


def _fail(exc: BaseException, prefix: str, code: int) -> int:
    """Human-readable line plus a machine-readable JSON line, both on stderr."""
    print(f"{prefix}: {exc}", file=sys.stderr)
    print(
        json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
        file=sys.stderr,
    )
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        return _fail(exc, "error", 2)
    except NumericalError as exc:
        return _fail(exc, "numerical error", 3)
    except OSError as exc:
        return _fail(exc, "error", 2)


if __name__ == "__main__":
    sys.exit(main())
