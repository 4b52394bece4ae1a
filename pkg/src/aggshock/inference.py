"""Variance estimation and weak-identification-robust inference.

The joint variance of (delta, pi) treats the post-period aggregate
regressions as driven by the serially correlated instrument: with
epsilon_z the post-period residual of Z on the deterministic controls and
Lambda the AR(1) kernel rows, the estimator is

    Sigma = [ ||e_y Lambda||^2        e_y Lambda Lambda' e_w' ]
            [ symmetric               ||e_w Lambda||^2        ]  / ||epsilon_z||^4

with no degrees-of-freedom correction anywhere. The test of tau0 compares
|delta - tau0 pi| to the normal quantile times the corresponding standard
error; the confidence set inverts the test over a grid and may be empty or
unbounded, both of which are reported rather than patched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import DataError, DegenerateInstrument
from .panel import AggregateData, BalancedPanel, SampleSplit
from .tsmodel import LambdaModel, fit_lambda_model
from .aggregate import EstimateResult, aggregate_series, estimate_stage

__all__ = [
    "VarianceEstimate",
    "TestResult",
    "GridSpec",
    "ConfidenceSet",
    "InferenceReport",
    "estimate_variance",
    "ar_test",
    "confidence_set",
    "run_inference",
]

DEFAULT_GRID_POINTS = 2001
DEFAULT_GRID_HALF_WIDTH_SES = 20.0


@dataclass(frozen=True)
class VarianceEstimate:
    """2x2 covariance of (delta, pi) and the serial model behind it."""

    sigma: np.ndarray
    rho_hat: float

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=float)
        if sigma.shape != (2, 2):
            raise DataError(f"sigma must be 2x2, got {sigma.shape}")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True)
class TestResult:
    tau0: float
    statistic: float
    critical: float
    reject: bool
    alpha: float
    zero_variance: bool


@dataclass(frozen=True)
class GridSpec:
    lo: float
    hi: float
    num: int

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.lo < self.hi):
            raise DataError(f"need finite lo < hi, got [{self.lo}, {self.hi}]")
        if self.num < 2:
            raise DataError(f"grid needs at least 2 points, got {self.num}")

    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.num)


@dataclass(frozen=True)
class ConfidenceSet:
    """Grid inversion of the test: maximal runs of non-rejected points.

    ``unbounded_below``/``unbounded_above`` flag sets that touch the grid
    boundary, the sign that the region extends beyond the window; ``empty``
    flags a set with no accepted point, a legal outcome of this test.
    """

    alpha: float
    grid: GridSpec
    intervals: tuple[tuple[float, float], ...]
    empty: bool
    unbounded_below: bool
    unbounded_above: bool


@dataclass(frozen=True)
class InferenceReport:
    variance: VarianceEstimate
    tests: tuple[TestResult, ...]
    confidence: ConfidenceSet | None


def estimate_variance(
    panel: BalancedPanel,
    omega: np.ndarray,
    agg: AggregateData,
    lam: LambdaModel,
) -> VarianceEstimate:
    """Post-period residual-based covariance of (delta, pi).

    Residuals: the aggregates on (Psi, Z), the instrument on Psi alone.

    Raises
    ------
    DegenerateInstrument
        If Z is perfectly explained by Psi over the post block.
    """
    if lam.T != panel.T or agg.T != panel.T:
        raise DataError("panel, aggregate data, and lambda model disagree on T")
    split = SampleSplit(T0=lam.T0, T1=lam.T1)
    post = np.arange(lam.T0, lam.T)
    y_series, w_series = aggregate_series(panel, omega, split)
    e_y = estimate_stage(y_series, agg.Z, agg.Psi, post).residuals
    e_w = estimate_stage(w_series, agg.Z, agg.Psi, post).residuals
    coef, *_ = np.linalg.lstsq(agg.Psi[post], agg.Z[post], rcond=None)
    e_z = agg.Z[post] - agg.Psi[post] @ coef
    denom = float(e_z @ e_z) ** 2
    if denom <= 1e-48 * max(float(agg.Z[post] @ agg.Z[post]) ** 2, np.finfo(float).tiny):
        raise DegenerateInstrument("Z has no residual variation over the post periods")
    u_y = e_y @ lam.lambda_post
    u_w = e_w @ lam.lambda_post
    sigma = (
        np.array([[u_y @ u_y, u_y @ u_w], [u_y @ u_w, u_w @ u_w]], dtype=float) / denom
    )
    return VarianceEstimate(sigma=sigma, rho_hat=lam.rho_hat)


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise DataError(f"alpha must be in (0, 1), got {alpha}")


def ar_test(
    delta: float, pi: float, variance: VarianceEstimate, tau0: float, alpha: float = 0.05
) -> TestResult:
    """Test tau = tau0: reject when |delta - tau0 pi| reaches the normal
    critical value for the variance of that linear combination.

    A zero critical value with a zero statistic is reported as non-rejection
    and flagged.
    """
    _check_alpha(alpha)
    s = variance.sigma
    var = float(s[0, 0] - 2.0 * tau0 * s[0, 1] + tau0**2 * s[1, 1])
    var = max(var, 0.0)
    statistic = abs(delta - tau0 * pi)
    critical = float(ndtri(1.0 - alpha / 2.0)) * np.sqrt(var)
    zero_variance = critical == 0.0
    reject = statistic >= critical and not (zero_variance and statistic == 0.0)
    return TestResult(
        tau0=float(tau0),
        statistic=float(statistic),
        critical=float(critical),
        reject=bool(reject),
        alpha=float(alpha),
        zero_variance=zero_variance,
    )


def _default_grid(delta: float, pi: float, variance: VarianceEstimate) -> GridSpec:
    """Window centered on tau = delta/pi, 20 delta-method ses to each side.

    With a numerically zero or non-finite first stage (or a degenerate se)
    the window falls back to a fixed wide, deterministic span; sets of that
    kind come back flagged unbounded, so only the flag is informative.
    """
    s = variance.sigma
    if abs(pi) > 0 and np.isfinite(delta / pi):
        tau_hat = delta / pi
        var = max(float(s[0, 0] - 2.0 * tau_hat * s[0, 1] + tau_hat**2 * s[1, 1]), 0.0)
        se = np.sqrt(var) / abs(pi)
        if np.isfinite(se) and se > 0:
            half = DEFAULT_GRID_HALF_WIDTH_SES * se
            return GridSpec(tau_hat - half, tau_hat + half, DEFAULT_GRID_POINTS)
        center, scale = tau_hat, max(1.0, abs(tau_hat))
    else:
        center, scale = 0.0, max(1.0, np.sqrt(max(float(s[0, 0]), 0.0)))
    return GridSpec(center - 1e6 * scale, center + 1e6 * scale, DEFAULT_GRID_POINTS)


def confidence_set(
    delta: float,
    pi: float,
    variance: VarianceEstimate,
    alpha: float = 0.05,
    grid: GridSpec | None = None,
) -> ConfidenceSet:
    """Invert the test over a grid of candidate tau values.

    Vectorizes the same statistic/critical comparison as :func:`ar_test`
    over the grid; a candidate is kept when the test does not reject.
    """
    _check_alpha(alpha)
    if grid is None:
        grid = _default_grid(delta, pi, variance)
    taus = grid.points()
    s = variance.sigma
    var = np.maximum(s[0, 0] - 2.0 * taus * s[0, 1] + taus**2 * s[1, 1], 0.0)
    critical = float(ndtri(1.0 - alpha / 2.0)) * np.sqrt(var)
    statistic = np.abs(delta - taus * pi)
    accept = statistic < critical
    accept |= (critical == 0.0) & (statistic == 0.0)

    intervals = []
    start = None
    for k, ok in enumerate(accept):
        if ok and start is None:
            start = k
        elif not ok and start is not None:
            intervals.append((float(taus[start]), float(taus[k - 1])))
            start = None
    if start is not None:
        intervals.append((float(taus[start]), float(taus[-1])))
    return ConfidenceSet(
        alpha=float(alpha),
        grid=grid,
        intervals=tuple(intervals),
        empty=not intervals,
        unbounded_below=bool(accept[0]),
        unbounded_above=bool(accept[-1]),
    )


def run_inference(
    panel: BalancedPanel,
    agg: AggregateData,
    result: EstimateResult,
    tau0s: tuple[float, ...] = (),
    alpha: float = 0.05,
    grid: GridSpec | None = None,
    with_ci: bool = False,
) -> InferenceReport:
    """Serial model, variance, requested tests, optional confidence set."""
    lam = fit_lambda_model(agg, result.split)
    variance = estimate_variance(panel, result.weights.omega, agg, lam)
    tests = tuple(ar_test(result.delta, result.pi, variance, t0, alpha) for t0 in tau0s)
    ci = confidence_set(result.delta, result.pi, variance, alpha, grid) if with_ci else None
    return InferenceReport(variance=variance, tests=tests, confidence=ci)
