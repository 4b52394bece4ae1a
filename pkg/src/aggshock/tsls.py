"""Two-stage least squares benchmark with unit and time fixed effects.

The panel TSLS estimator instrumenting W_it with D_i * Z_t under two-way
fixed effects has an exact time-series representation: aggregate each
outcome with the weights (D_i - mean(D)) / var(D) (population variance, the
whole divided by n) and regress the aggregate on (1, Z_t). Both routes are
implemented and their coefficient-level agreement is a standing numerical
check, so neither may be redefined in terms of the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CollinearInstrument, DataError
from .panel import BalancedPanel, ExposureVector, demean_two_way

__all__ = ["TslsResult", "tsls_fixed_effects", "tsls_timeseries", "tsls_estimate", "tsls_weights"]

WEAK_FIRST_STAGE_TOL = 1e-10


@dataclass(frozen=True)
class TslsResult:
    """Reduced-form and first-stage coefficients from both routes.

    ``tau`` is ``delta_fe / pi_fe``; it is NaN with ``weak_first_stage``
    set when the first stage is numerically zero.
    """

    delta_fe: float
    pi_fe: float
    delta_ts: float
    pi_ts: float
    tau: float
    weak_first_stage: bool


def _check_lengths(panel: BalancedPanel, exposure: ExposureVector, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if exposure.n != panel.n:
        raise DataError(f"exposure length {exposure.n} does not match n={panel.n}")
    if Z.shape != (panel.T,):
        raise DataError(f"Z must have shape ({panel.T},), got {Z.shape}")
    return Z


def tsls_fixed_effects(
    panel: BalancedPanel, exposure: ExposureVector, Z: np.ndarray
) -> tuple[float, float]:
    """Within-transformation OLS of Y and W on the interacted instrument.

    Returns (delta, pi), the coefficients on D_i * Z_t after two-way
    demeaning of outcome, treatment, and regressor.
    """
    Z = _check_lengths(panel, exposure, Z)
    X = np.outer(exposure.D, Z)
    Xd = demean_two_way(X)
    sxx = float(np.sum(Xd * Xd))
    if sxx <= 1e-24 * max(float(np.sum(X * X)), np.finfo(float).tiny):
        raise CollinearInstrument("interacted instrument has no within variation")
    delta = float(np.sum(Xd * panel.Y)) / sxx
    pi = float(np.sum(Xd * panel.W)) / sxx
    return delta, pi


def tsls_weights(exposure: ExposureVector) -> np.ndarray:
    """Aggregation weights (D_i - mean(D)) / var(D), var with the 1/n rule."""
    D = exposure.D
    d = D - D.mean()
    v = float(d @ d) / D.shape[0]
    if v <= 1e-24 * max(float(D @ D) / D.shape[0], np.finfo(float).tiny):
        raise CollinearInstrument("exposures have no cross-sectional variation")
    return d / v


def tsls_timeseries(
    panel: BalancedPanel, exposure: ExposureVector, Z: np.ndarray
) -> tuple[float, float]:
    """Aggregate with the exposure weights, then simple OLS slopes on Z.

    Aggregates are (1/n) sum_i omega_i X_it with omega from
    :func:`tsls_weights`; the slope of each aggregate on (1, Z_t) matches
    the fixed-effects coefficients exactly in exact arithmetic.
    """
    Z = _check_lengths(panel, exposure, Z)
    omega = tsls_weights(exposure)
    y_series = panel.Y.T @ omega / panel.n
    w_series = panel.W.T @ omega / panel.n
    zc = Z - Z.mean()
    szz = float(zc @ zc)
    if szz <= 1e-24 * max(float(Z @ Z), np.finfo(float).tiny):
        raise CollinearInstrument("Z has no time variation")
    delta = float(zc @ y_series) / szz
    pi = float(zc @ w_series) / szz
    return delta, pi


def tsls_estimate(panel: BalancedPanel, exposure: ExposureVector, Z: np.ndarray) -> TslsResult:
    """Run both routes and form the ratio estimate from the FE coefficients."""
    delta_fe, pi_fe = tsls_fixed_effects(panel, exposure, Z)
    delta_ts, pi_ts = tsls_timeseries(panel, exposure, Z)
    weak = abs(pi_fe) < WEAK_FIRST_STAGE_TOL
    tau = float("nan") if weak else delta_fe / pi_fe
    return TslsResult(
        delta_fe=delta_fe,
        pi_fe=pi_fe,
        delta_ts=delta_ts,
        pi_ts=pi_ts,
        tau=tau,
        weak_first_stage=weak,
    )
