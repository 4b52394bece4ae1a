"""Deterministic time controls and the serial-correlation model for Z.

The post-period inference weights observations through a lower-triangular
Toeplitz matrix built from an AR(1) fit to the residualized instrument: with
periods in natural time order, the row for post period t carries rho^(t-s)
at column s <= t and zeros elsewhere, so that row times innovation vector
reproduces a finite-history AR(1) disturbance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    DegenerateInstrument,
    DegenerateSeries,
    NonFiniteValue,
    RankDeficientPsi,
)
from .panel import AggregateData, SampleSplit

__all__ = [
    "PsiSpec",
    "build_psi",
    "z_residuals",
    "fit_ar1",
    "LambdaModel",
    "build_lambda_post",
    "fit_lambda_model",
]

RHO_CLAMP = 0.99


@dataclass(frozen=True)
class PsiSpec:
    """Recipe for the deterministic control matrix.

    ``trend_degree`` adds polynomial trend columns (t/T)^j, j = 1..degree;
    ``extra`` appends caller-supplied columns of shape (T, k).
    """

    trend_degree: int = 0
    extra: np.ndarray | None = None

    def __post_init__(self):
        if self.trend_degree < 0:
            raise DataError(f"trend_degree must be >= 0, got {self.trend_degree}")


def build_psi(T: int, spec: PsiSpec | None = None) -> np.ndarray:
    """Constant column, polynomial trends, then any extra columns."""
    spec = spec or PsiSpec()
    cols = [np.ones(T)]
    t = np.arange(1, T + 1) / T
    cols.extend(t**j for j in range(1, spec.trend_degree + 1))
    if spec.extra is not None:
        extra = np.asarray(spec.extra, dtype=float)
        if extra.ndim != 2 or extra.shape[0] != T:
            raise DataError(f"extra columns must have shape (T, k) with T={T}, got {extra.shape}")
        if not np.all(np.isfinite(extra)):
            raise NonFiniteValue("extra Psi columns contain non-finite entries")
        cols.extend(extra.T)
    Psi = np.column_stack(cols)
    if np.linalg.matrix_rank(Psi) < Psi.shape[1]:
        raise RankDeficientPsi("deterministic controls are collinear")
    return Psi


def z_residuals(Z: np.ndarray, Psi: np.ndarray, periods) -> np.ndarray:
    """OLS residuals of Z on Psi over the selected periods."""
    Z = np.asarray(Z, dtype=float)
    Psi = np.asarray(Psi, dtype=float)
    z = Z[periods]
    X = Psi[periods]
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientPsi("deterministic controls are collinear over the selected periods")
    coef, *_ = np.linalg.lstsq(X, z, rcond=None)
    return z - X @ coef


def fit_ar1(resid: np.ndarray) -> float:
    """First-order autoregressive coefficient of a residual series.

    No-intercept OLS of r_t on r_{t-1} over consecutive pairs, clamped to
    [-0.99, 0.99] so the implied weighting kernel stays well conditioned.
    """
    r = np.asarray(resid, dtype=float)
    if r.ndim != 1 or r.shape[0] < 3:
        raise DegenerateSeries(f"need at least 3 observations to fit, got shape {r.shape}")
    lagged = r[:-1]
    denom = float(lagged @ lagged)
    if denom <= 1e-26 * max(float(r @ r), np.finfo(float).tiny):
        raise DegenerateSeries("residual series has no variation to fit")
    rho = float(r[1:] @ lagged) / denom
    return float(np.clip(rho, -RHO_CLAMP, RHO_CLAMP))


@dataclass(frozen=True)
class LambdaModel:
    """Post-period weighting kernel derived from an AR(1) coefficient."""

    rho_hat: float
    T: int
    T0: int
    lambda_post: np.ndarray

    @property
    def T1(self) -> int:
        return self.T - self.T0


def build_lambda_post(rho_hat: float, T: int, T0: int) -> LambdaModel:
    """Rows of the full-history AR(1) kernel for the post periods.

    The (T - T0) x T matrix has entry rho^(t-s) at (t, s) for s <= t, zero
    above the diagonal, with t running over post periods. For rho = 0 the
    rows are plain selectors of the post periods.
    """
    if not 0 < T0 < T:
        raise DataError(f"need 0 < T0 < T, got T0={T0}, T={T}")
    if not abs(rho_hat) <= 1.0:
        raise DataError(f"|rho| must be <= 1, got {rho_hat}")
    t = np.arange(T0 + 1, T + 1)[:, None]
    s = np.arange(1, T + 1)[None, :]
    lam = np.where(s <= t, np.power(float(rho_hat), np.maximum(t - s, 0)), 0.0)
    return LambdaModel(rho_hat=float(rho_hat), T=T, T0=T0, lambda_post=lam)


def fit_lambda_model(agg: AggregateData, split: SampleSplit) -> LambdaModel:
    """Residualize Z over the post periods, fit the AR(1), build the kernel."""
    post = np.arange(split.T0, split.T)
    resid = z_residuals(agg.Z, agg.Psi, post)
    if float(resid @ resid) <= 1e-24 * max(float(agg.Z[post] @ agg.Z[post]), np.finfo(float).tiny):
        raise DegenerateInstrument("Z has no residual variation over the post periods")
    rho = fit_ar1(resid)
    return build_lambda_post(rho, split.T, split.T0)
