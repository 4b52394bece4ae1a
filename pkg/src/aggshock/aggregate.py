"""Post-period aggregate regressions and the headline ratio estimate.

With weights solved on the pre block, the post-period aggregates
Y_t(omega) = (1/n) sum_i omega_i Y_it and W_t(omega) are each regressed on
(1, non-constant Psi columns, Z_t). The coefficient on Z in the Y equation
is the reduced form delta, in the W equation the first stage pi, and the
effect estimate is tau = delta / pi.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInstrument, RankDeficientPsi
from .panel import AggregateData, BalancedPanel, ExposureVector, SampleSplit
from .weights import WeightConfig, WeightSolution, solve_weights

__all__ = ["StageFit", "EstimateResult", "aggregate_series", "estimate_stage", "estimate"]

WEAK_FIRST_STAGE_TOL = 1e-10
ZERO_PI_TOL = 1e-12


@dataclass(frozen=True)
class StageFit:
    """OLS fit of one aggregated series on (1, psi, Z) over the post block."""

    beta: float
    eta_psi: np.ndarray
    coef_z: float
    residuals: np.ndarray


@dataclass(frozen=True)
class EstimateResult:
    """Reduced form, first stage, and their ratio, with the solved weights."""

    delta: float
    pi: float
    tau: float
    weights: WeightSolution
    fit_y: StageFit
    fit_w: StageFit
    split: SampleSplit
    flags: tuple[str, ...]


def aggregate_series(
    panel: BalancedPanel, omega: np.ndarray, split: SampleSplit
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted cross-sectional averages (1/n) sum_i omega_i X_it, post block."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (panel.n,):
        raise DataError(f"omega must have shape ({panel.n},), got {omega.shape}")
    if split.T != panel.T:
        raise DataError(f"split covers {split.T} periods, panel has {panel.T}")
    post = slice(split.T0, panel.T)
    return panel.Y[:, post].T @ omega / panel.n, panel.W[:, post].T @ omega / panel.n


def estimate_stage(series: np.ndarray, Z: np.ndarray, Psi: np.ndarray, periods) -> StageFit:
    """Regress an aggregated series on (Psi, Z) over the selected periods.

    Psi carries its own constant column, so the intercept appears once; the
    Z coefficient is reported separately from the deterministic part.
    """
    series = np.asarray(series, dtype=float)
    X = np.column_stack([Psi[periods], Z[periods]])
    if series.shape != (X.shape[0],):
        raise DataError(f"series length {series.shape} does not match {X.shape[0]} periods")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        if np.linalg.matrix_rank(X[:, :-1]) < X.shape[1] - 1:
            raise RankDeficientPsi("Psi is rank deficient over the selected periods")
        raise DegenerateInstrument("Z is collinear with Psi over the selected periods")
    coef, *_ = np.linalg.lstsq(X, series, rcond=None)
    return StageFit(
        beta=float(coef[0]),
        eta_psi=coef[1:-1],
        coef_z=float(coef[-1]),
        residuals=series - X @ coef,
    )


def estimate(
    panel: BalancedPanel,
    exposure: ExposureVector,
    agg: AggregateData,
    config: WeightConfig | None = None,
) -> EstimateResult:
    """Full pipeline: solve weights on the pre block, fit both post stages.

    The first stage is flagged weak when |pi| < 1e-10; tau is NaN once pi
    is numerically zero, otherwise always satisfies tau * pi = delta.
    """
    sol = solve_weights(panel, exposure, agg, config)
    split = SampleSplit(T0=sol.t0, T1=panel.T - sol.t0)
    post = np.arange(sol.t0, panel.T)
    y_series, w_series = aggregate_series(panel, sol.omega, split)
    fit_y = estimate_stage(y_series, agg.Z, agg.Psi, post)
    fit_w = estimate_stage(w_series, agg.Z, agg.Psi, post)
    delta, pi = fit_y.coef_z, fit_w.coef_z
    flags = []
    if sol.zeta_retried:
        flags.append("zeta_retried")
    if sol.active_set:
        flags.append("sign_constraint_active")
    if abs(pi) < WEAK_FIRST_STAGE_TOL:
        flags.append("weak_first_stage")
    tau = delta / pi if abs(pi) > ZERO_PI_TOL else float("nan")
    return EstimateResult(
        delta=delta,
        pi=pi,
        tau=tau,
        weights=sol,
        fit_y=fit_y,
        fit_w=fit_w,
        split=split,
        flags=tuple(flags),
    )
