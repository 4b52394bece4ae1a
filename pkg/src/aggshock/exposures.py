"""Constructed unit exposures from pre-period first-stage regressions.

When no exposure measure is observed, each unit's sensitivity to the
aggregate shock is estimated by unit-by-unit OLS of W_it on (Psi, Z) over
the pre block only; the resulting slope on Z becomes D_i. Post-period data
never enters, so the construction cannot leak the evaluation sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CollinearInstrumentPre, DataError, RankDeficientPsi
from .panel import AggregateData, BalancedPanel, ExposureVector, SampleSplit

__all__ = ["ExposureFit", "construct_exposures", "mean_exposures"]


@dataclass(frozen=True)
class ExposureFit:
    """Per-unit slopes on Z with their OLS standard errors and R-squared."""

    exposure: ExposureVector
    per_unit_se: np.ndarray
    r2: np.ndarray


def construct_exposures(panel: BalancedPanel, agg: AggregateData, t0: int) -> ExposureFit:
    """Unit-by-unit pre-period regressions W_it on (Psi, Z), slopes on Z.

    All units share the design matrix, so a single least-squares solve
    produces every slope; standard errors use the homoskedastic formula
    with T0 - (p + 1) residual degrees of freedom.
    """
    if agg.T != panel.T:
        raise DataError(f"aggregate length {agg.T} does not match T={panel.T}")
    split = SampleSplit(T0=t0, T1=panel.T - t0)
    split.validate_for(agg.p)
    X = np.column_stack([agg.Psi[:t0], agg.Z[:t0]])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        if np.linalg.matrix_rank(X[:, :-1]) < X.shape[1] - 1:
            raise RankDeficientPsi("Psi is rank deficient over the pre-period")
        raise CollinearInstrumentPre("Z lies in the span of Psi over the pre-period")
    Wpre = panel.W[:, :t0].T
    coef, *_ = np.linalg.lstsq(X, Wpre, rcond=None)
    resid = Wpre - X @ coef
    dof = t0 - X.shape[1]
    rss = np.sum(resid**2, axis=0)
    gram_inv_zz = float(np.linalg.inv(X.T @ X)[-1, -1])
    se = np.sqrt(rss / dof * gram_inv_zz)
    centered = Wpre - Wpre.mean(axis=0, keepdims=True)
    tss = np.sum(centered**2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(tss > 0, 1.0 - rss / tss, 0.0)
    return ExposureFit(exposure=ExposureVector(coef[-1]), per_unit_se=se, r2=r2)


def mean_exposures(panel: BalancedPanel, t0: int) -> ExposureVector:
    """Simple alternative: each unit's pre-period average treatment level."""
    if not 1 <= t0 <= panel.T:
        raise DataError(f"t0={t0} outside 1..{panel.T}")
    return ExposureVector(panel.W[:, :t0].mean(axis=1))
