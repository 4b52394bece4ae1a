"""Simulation designs, calibration, and the Monte Carlo driver.

The generating process is

    W_it = beta_i^w + mu_t^w + L_it^w + pi_i Z_t + theta_i^w H_t + eps_it^w
    Y_it = beta_i^y + mu_t^y + L_it^y + tau W_it + theta_i^y H_t + eps_it^y

where Z is an MA(2) aggregate shock, H = a Z + b Ztilde is an unobserved
aggregate confounder correlated with Z, L^k are low-rank interactive
panels, and eps is idiosyncratic noise. Four designs toggle the low-rank
component and the confounder: design 1 has neither, design 2 only L,
design 3 only the confounder, design 4 both.

Unit-level parameters (pi, theta, beta, L) are drawn or calibrated once
and live in the DgpSpec; each replication redraws only the shocks (Z, Ztilde,
eps) from a per-replication seed spawned off the master seed, so results
are reproducible and independent of the parallel schedule.

The exposure measure D fed to both estimators is frozen once per study,
not re-estimated per replication. It comes from the first third of a
calibration draw generated without the confounder (or from a supplied
observed panel), mirroring how practitioners construct D from the data
they have before any counterfactual is imagined. Freezing matters: if D
were re-fit on each simulated panel, its measurement error would be the
replication's own confounder loadings, and any weighting normalized by D
would inherit them, erasing the contrast the designs are built to show.

Targets rescale the truth by eta, the OLS slope of the frozen D on pi:
the first-stage target is 1/eta, the reduced-form target tau/eta, and the
effect target is tau itself. With a clean calibration draw eta is close
to 1, so the first-stage target is close to the usual normalization.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .aggregate import estimate
from .errors import (
    DataError,
    DegenerateInstrument,
    DegenerateSeries,
    MonteCarloUnstable,
    NumericalError,
    RankTooLarge,
)
from .exposures import construct_exposures
from .inference import ar_test, estimate_variance
from .panel import AggregateData, BalancedPanel, ExposureVector, default_t0
from .tsls import tsls_estimate
from .tsmodel import fit_lambda_model
from .weights import WeightConfig

__all__ = [
    "DgpSpec",
    "CellStats",
    "McReport",
    "design_flags",
    "apply_design",
    "synthetic_spec",
    "calibrate_from_panel",
    "simulate_once",
    "calibration_exposures",
    "run_monte_carlo",
    "rejection_rates",
    "fit_ma2",
    "ma2_variance",
]

# Reference parameterization for the synthetic designs. The shock process
# and loadings mirror a state-level panel calibration: a persistent MA(2)
# instrument, a confounder built mostly from the instrument itself, unit
# loadings correlated with the exposure slopes, and idiosyncratic noise far
# smaller than the aggregate signal.
TAU_DEFAULT = 1.43
PI_MEAN, PI_SD = 1.0, 0.25
NOISE_COV_DEFAULT = ((0.001, 0.0), (0.0, 0.003))
Z_MA_DEFAULT = (1.14, 0.52)
Z_INNOVATION_VAR_DEFAULT = 0.43
H_MIX_DEFAULT = (0.5, 0.25)
THETA_W_PI_LOAD = 0.2
THETA_Y_PI_LOAD, THETA_Y_NOISE_SCALE, THETA_Y_CORR = 0.45, 1.5, 0.3
FACTOR_RANK = 11
# Frobenius norm of each low-rank panel: noise standard deviation times T,
# i.e. per-entry variance of roughly noise_var * T / n.
FACTOR_FROBENIUS_PER_NOISE_SD = 1.0
CONFOUNDER_SIGNAL_RATIO_BOUNDS = (0.5, 2.0)
MAX_FAILURE_SHARE = 0.01


def ma2_variance(coeffs: tuple[float, float], innovation_var: float) -> float:
    """Stationary variance of an MA(2) process."""
    b1, b2 = coeffs
    return innovation_var * (1.0 + b1**2 + b2**2)


@dataclass(frozen=True)
class DgpSpec:
    """Fixed parameters of the generating process plus shock laws."""

    tau: float
    n: int
    T: int
    pi: np.ndarray
    theta_y: np.ndarray
    theta_w: np.ndarray
    beta_y: np.ndarray
    beta_w: np.ndarray
    mu_y: np.ndarray
    mu_w: np.ndarray
    L_y: np.ndarray
    L_w: np.ndarray
    noise_cov: np.ndarray
    z_ma: tuple[float, float]
    z_innovation_var: float
    h_mix: tuple[float, float]
    use_L: bool = False
    use_H: bool = False

    def __post_init__(self):
        n, T = self.n, self.T
        for name in ("pi", "theta_y", "theta_w", "beta_y", "beta_w"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise DataError(f"{name} must have shape ({n},), got {arr.shape}")
            object.__setattr__(self, name, arr)
        for name in ("mu_y", "mu_w"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (T,):
                raise DataError(f"{name} must have shape ({T},), got {arr.shape}")
            object.__setattr__(self, name, arr)
        for name in ("L_y", "L_w"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n, T):
                raise DataError(f"{name} must have shape ({n}, {T}), got {arr.shape}")
            object.__setattr__(self, name, arr)
        cov = np.asarray(self.noise_cov, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise DataError("noise_cov must be a symmetric 2x2 matrix")
        if np.any(np.linalg.eigvalsh(cov) < -1e-12):
            raise DataError("noise_cov must be positive semidefinite")
        object.__setattr__(self, "noise_cov", cov)
        if self.z_innovation_var <= 0:
            raise DataError(f"z innovation variance must be positive, got {self.z_innovation_var}")
        object.__setattr__(self, "z_ma", (float(self.z_ma[0]), float(self.z_ma[1])))
        object.__setattr__(self, "h_mix", (float(self.h_mix[0]), float(self.h_mix[1])))


def _check_confounder_scale(pi: np.ndarray, h_mix: tuple[float, float]) -> None:
    """The confounder component must be comparable to the signal component.

    Uses implied population moments, with E[theta_w^2] from the loading
    construction rather than a realized draw (the shocks, and hence any
    realized norms, do not exist until simulation): the Frobenius scale of
    theta_w * H relative to pi * Z is

        sqrt( E[theta_w^2] (a^2 + b^2) / E[pi^2] ).
    """
    m2_pi = float(np.mean(pi**2))
    if m2_pi <= 0:
        raise DataError("exposure slopes are identically zero")
    m2_theta = THETA_W_PI_LOAD**2 * m2_pi + (1.0 - THETA_W_PI_LOAD**2)
    a, b = h_mix
    ratio = math.sqrt(m2_theta * (a**2 + b**2) / m2_pi)
    lo, hi = CONFOUNDER_SIGNAL_RATIO_BOUNDS
    if not lo <= ratio <= hi:
        raise DataError(
            f"confounder-to-signal scale {ratio:.3f} outside [{lo}, {hi}]; "
            "the exposure slopes or the confounder mix are off"
        )


def design_flags(design: int) -> tuple[bool, bool]:
    """Map design number 1..4 to (use_L, use_H)."""
    table = {1: (False, False), 2: (True, False), 3: (False, True), 4: (True, True)}
    if design not in table:
        raise DataError(f"design must be 1..4, got {design}")
    return table[design]


def apply_design(spec: DgpSpec, design: int) -> DgpSpec:
    use_L, use_H = design_flags(design)
    return replace(spec, use_L=use_L, use_H=use_H)


def synthetic_spec(n: int, T: int, seed: int = 0) -> DgpSpec:
    """Reference parameterization at arbitrary panel dimensions.

    Exposure slopes are centered at 1 so the aggregate first stage is near
    1; loadings on the confounder correlate with the slopes; the low-rank
    panels are random rank-11 matrices rescaled to the documented
    Frobenius norm.
    """
    if n < 3 or T < 9:
        raise DataError(f"need n >= 3 and T >= 9, got n={n}, T={T}")
    rng = np.random.default_rng(seed)
    pi = PI_MEAN + PI_SD * rng.standard_normal(n)
    _check_confounder_scale(pi, H_MIX_DEFAULT)
    theta_w = THETA_W_PI_LOAD * pi + math.sqrt(1.0 - THETA_W_PI_LOAD**2) * rng.standard_normal(n)
    theta_y = THETA_Y_PI_LOAD * pi + THETA_Y_NOISE_SCALE * math.sqrt(
        1.0 - THETA_Y_CORR**2
    ) * rng.standard_normal(n)
    beta_y = rng.standard_normal(n)
    beta_w = rng.standard_normal(n)
    mu_y = rng.standard_normal(T)
    mu_w = rng.standard_normal(T)
    cov = np.array(NOISE_COV_DEFAULT)
    rank = min(FACTOR_RANK, min(n, T) - 1)
    L = {}
    for key, var in (("y", cov[0, 0]), ("w", cov[1, 1])):
        raw = rng.standard_normal((n, rank)) @ rng.standard_normal((rank, T))
        target = FACTOR_FROBENIUS_PER_NOISE_SD * math.sqrt(var) * T
        L[key] = raw * (target / np.linalg.norm(raw))
    return DgpSpec(
        tau=TAU_DEFAULT,
        n=n,
        T=T,
        pi=pi,
        theta_y=theta_y,
        theta_w=theta_w,
        beta_y=beta_y,
        beta_w=beta_w,
        mu_y=mu_y,
        mu_w=mu_w,
        L_y=L["y"],
        L_w=L["w"],
        noise_cov=cov,
        z_ma=Z_MA_DEFAULT,
        z_innovation_var=Z_INNOVATION_VAR_DEFAULT,
        h_mix=H_MIX_DEFAULT,
    )


def fit_ma2(acov: np.ndarray) -> tuple[tuple[float, float], float]:
    """MA(2) coefficients and innovation variance from autocovariances 0..2.

    Method of moments on the autocorrelation ratios with Newton refinement
    from the best point of a coarse grid; when the sample ratios are not
    exactly attainable by an MA(2), the closest grid-refined point is
    returned.
    """
    g0, g1, g2 = (float(v) for v in acov)
    if g0 <= 0:
        raise DegenerateSeries("autocovariance at lag 0 must be positive")
    r1, r2 = g1 / g0, g2 / g0

    def residual(b1, b2):
        s = 1.0 + b1**2 + b2**2
        return np.array([b1 * (1.0 + b2) / s - r1, b2 / s - r2])

    def jacobian(b1, b2):
        s = 1.0 + b1**2 + b2**2
        return np.array(
            [
                [(1.0 + b2) * (s - 2.0 * b1**2) / s**2, b1 * (s - 2.0 * b2 * (1.0 + b2)) / s**2],
                [-2.0 * b1 * b2 / s**2, (s - 2.0 * b2**2) / s**2],
            ]
        )

    grid = np.arange(-2.0, 2.0001, 0.05)
    best = None
    for b1 in grid:
        for b2 in grid:
            val = float(residual(b1, b2) @ residual(b1, b2))
            if best is None or val < best[0]:
                best = (val, b1, b2)
    _, b1, b2 = best
    for _ in range(60):
        f = residual(b1, b2)
        if float(f @ f) < 1e-24:
            break
        try:
            step = np.linalg.solve(jacobian(b1, b2), f)
        except np.linalg.LinAlgError:
            break
        damp = 1.0
        base = float(f @ f)
        while damp > 1e-8:
            cand = residual(b1 - damp * step[0], b2 - damp * step[1])
            if float(cand @ cand) < base:
                b1, b2 = b1 - damp * step[0], b2 - damp * step[1]
                break
            damp /= 2.0
        else:
            break
    s = 1.0 + b1**2 + b2**2
    return (float(b1), float(b2)), g0 / s


def calibrate_from_panel(
    panel: BalancedPanel, agg: AggregateData, rank: int = FACTOR_RANK, seed: int = 0
) -> DgpSpec:
    """Fit the generating process to an observed panel.

    Time-demeans both matrices, runs per-unit OLS on (1, Z) over all
    periods to obtain slopes and residuals, extracts rank-``rank`` factor
    panels from the residuals by truncated SVD, measures the leftover
    noise covariance elementwise, and fits the MA(2) shock law to Z.
    Confounder loadings are then rebuilt from the estimated slopes exactly
    as in the synthetic parameterization.
    """
    if agg.T != panel.T:
        raise DataError(f"aggregate length {agg.T} does not match T={panel.T}")
    n, T = panel.n, panel.T
    if rank >= min(n, T):
        raise RankTooLarge(f"rank {rank} needs min(n, T) > rank, got min={min(n, T)}")
    mu_y = panel.Y.mean(axis=0)
    mu_w = panel.W.mean(axis=0)
    Yd = panel.Y - mu_y[None, :]
    Wd = panel.W - mu_w[None, :]
    X = np.column_stack([np.ones(T), agg.Z])
    coef_y, *_ = np.linalg.lstsq(X, Yd.T, rcond=None)
    coef_w, *_ = np.linalg.lstsq(X, Wd.T, rcond=None)
    pi = coef_w[1].copy()
    E = {"y": Yd - (X @ coef_y).T, "w": Wd - (X @ coef_w).T}
    L = {}
    R = {}
    for key in ("y", "w"):
        u, s, vt = np.linalg.svd(E[key], full_matrices=False)
        L[key] = (u[:, :rank] * s[:rank]) @ vt[:rank]
        R[key] = E[key] - L[key]
    cov = np.array(
        [
            [np.mean(R["y"] * R["y"]), np.mean(R["y"] * R["w"])],
            [np.mean(R["y"] * R["w"]), np.mean(R["w"] * R["w"])],
        ]
    )
    zc = agg.Z - agg.Z.mean()
    acov = [float(zc[: T - l] @ zc[l:]) / T for l in range(3)]
    z_ma, innov = fit_ma2(np.array(acov))
    rng = np.random.default_rng(seed)
    theta_w = THETA_W_PI_LOAD * pi + math.sqrt(1.0 - THETA_W_PI_LOAD**2) * rng.standard_normal(n)
    theta_y = THETA_Y_PI_LOAD * pi + THETA_Y_NOISE_SCALE * math.sqrt(
        1.0 - THETA_Y_CORR**2
    ) * rng.standard_normal(n)
    return DgpSpec(
        tau=TAU_DEFAULT,
        n=n,
        T=T,
        pi=pi,
        theta_y=theta_y,
        theta_w=theta_w,
        beta_y=coef_y[0].copy(),
        beta_w=coef_w[0].copy(),
        mu_y=mu_y,
        mu_w=mu_w,
        L_y=L["y"],
        L_w=L["w"],
        noise_cov=cov,
        z_ma=z_ma,
        z_innovation_var=innov,
        h_mix=H_MIX_DEFAULT,
    )


def _ma2_path(rng: np.random.Generator, spec: DgpSpec) -> np.ndarray:
    b1, b2 = spec.z_ma
    nu = rng.normal(0.0, math.sqrt(spec.z_innovation_var), spec.T + 2)
    return nu[2:] + b1 * nu[1:-1] + b2 * nu[:-2]


def simulate_once(spec: DgpSpec, seed) -> tuple[BalancedPanel, np.ndarray, np.ndarray]:
    """One draw of the process; returns (panel, Z, H).

    All shocks are drawn in a fixed order regardless of the design flags,
    so two designs at the same seed differ only through the toggled terms.
    """
    rng = np.random.default_rng(seed)
    Z = _ma2_path(rng, spec)
    Ztilde = _ma2_path(rng, spec)
    a, b = spec.h_mix
    H = a * Z + b * Ztilde
    evals, evecs = np.linalg.eigh(spec.noise_cov)
    factor = evecs * np.sqrt(np.clip(evals, 0.0, None))
    raw = rng.standard_normal((2, spec.n, spec.T))
    eps = np.einsum("jk,kit->jit", factor, raw)
    use_L = 1.0 if spec.use_L else 0.0
    use_H = 1.0 if spec.use_H else 0.0
    W = (
        spec.beta_w[:, None]
        + spec.mu_w[None, :]
        + use_L * spec.L_w
        + np.outer(spec.pi, Z)
        + use_H * np.outer(spec.theta_w, H)
        + eps[1]
    )
    Y = (
        spec.beta_y[:, None]
        + spec.mu_y[None, :]
        + use_L * spec.L_y
        + spec.tau * W
        + use_H * np.outer(spec.theta_y, H)
        + eps[0]
    )
    panel = BalancedPanel(Y, W, tuple(range(1, spec.n + 1)), tuple(range(1, spec.T + 1)))
    return panel, Z, H


@dataclass(frozen=True)
class CellStats:
    rmse: float
    bias: float


@dataclass(frozen=True)
class McReport:
    """Per-estimator, per-target error summaries over the replications."""

    design: int
    reps: int
    seed: int
    tau: float
    failures: int
    cells: dict
    rejection_rate: float | None
    tau0: float | None
    alpha: float | None
    errors: dict | None


TARGETS = ("delta", "pi", "tau")
ESTIMATORS = ("ours", "tsls")


def calibration_exposures(spec: DgpSpec, seed) -> ExposureVector:
    """Exposure measure from the first third of a confounder-free draw.

    The draw keeps the low-rank panels and the idiosyncratic noise but
    turns the confounder off, matching the observable model the
    calibration step itself fits; the measurement error in D is therefore
    independent of the loadings theta used in the evaluation draws.
    """
    calib = replace(spec, use_L=True, use_H=False)
    panel, Z, _ = simulate_once(calib, seed)
    agg = AggregateData(Z, np.ones((spec.T, 1)))
    return construct_exposures(panel, agg, default_t0(spec.T)).exposure


def _targets(spec: DgpSpec, D: ExposureVector) -> dict:
    """Estimands implied by the frozen exposure measure."""
    pic = spec.pi - spec.pi.mean()
    eta = float(pic @ (D.D - D.D.mean())) / float(pic @ pic)
    if abs(eta) <= 1e-8:
        raise DegenerateInstrument("exposure measure is uncorrelated with the slopes")
    return {"delta": spec.tau / eta, "pi": 1.0 / eta, "tau": spec.tau}


def _one_replication(spec: DgpSpec, child_seed, D, target, tau0, alpha):
    """Errors against the study targets, plus the test outcome."""
    panel, Z, _ = simulate_once(spec, child_seed)
    agg = AggregateData(Z, np.ones((spec.T, 1)))
    t0 = default_t0(spec.T)
    res = estimate(panel, D, agg, WeightConfig(t0=t0))
    ts = tsls_estimate(panel, D, Z)
    errors = {
        "ours": (res.delta - target["delta"], res.pi - target["pi"], res.tau - target["tau"]),
        "tsls": (
            ts.delta_fe - target["delta"],
            ts.pi_fe - target["pi"],
            ts.tau - target["tau"],
        ),
    }
    reject = None
    if tau0 is not None:
        lam = fit_lambda_model(agg, res.split)
        variance = estimate_variance(panel, res.weights.omega, agg, lam)
        reject = ar_test(res.delta, res.pi, variance, tau0, alpha).reject
    return errors, reject


def run_monte_carlo(
    spec: DgpSpec,
    design: int,
    reps: int,
    seed: int = 0,
    estimators: tuple[str, ...] = ESTIMATORS,
    tau0: float | None = None,
    alpha: float = 0.05,
    threads: int | None = None,
    keep_errors: bool = False,
    exposure: ExposureVector | None = None,
) -> McReport:
    """Replicate the design and summarize errors against the study targets.

    The exposure measure is frozen before the loop: either the supplied
    one (first-third slopes of an observed panel) or the calibration-draw
    construction seeded off the master seed. Per-replication seeds are
    spawned up front and results are reduced in replication order, so the
    report is identical for any ``threads`` value. Replications that
    raise a numerical error or produce non-finite estimates are excluded;
    more than 1% of them aborts the run.
    """
    if reps < 1:
        raise DataError(f"reps must be >= 1, got {reps}")
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise DataError(f"unknown estimators: {sorted(unknown)}")
    spec_d = apply_design(spec, design)
    calib_child, *children = np.random.SeedSequence(seed).spawn(reps + 1)
    D = exposure if exposure is not None else calibration_exposures(spec, calib_child)
    if D.n != spec.n:
        raise DataError(f"exposure length {D.n} does not match n={spec.n}")
    target = _targets(spec, D)

    def worker(child):
        try:
            return _one_replication(spec_d, child, D, target, tau0, alpha)
        except NumericalError:
            return None

    if threads is None or threads <= 1:
        results = [worker(c) for c in children]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(worker, children))

    err = {est: np.full((reps, len(TARGETS)), np.nan) for est in estimators}
    rejects = np.full(reps, np.nan)
    failures = 0
    for r, out in enumerate(results):
        ok = out is not None and all(
            math.isfinite(v) for est in estimators for v in out[0][est]
        )
        if not ok:
            failures += 1
            continue
        errors, reject = out
        for est in estimators:
            err[est][r] = errors[est]
        if reject is not None:
            rejects[r] = float(reject)
    if failures / reps > MAX_FAILURE_SHARE:
        raise MonteCarloUnstable(f"{failures} of {reps} replications failed")

    cells = {}
    for est in estimators:
        good = err[est][~np.isnan(err[est][:, 0])]
        cells[est] = {
            t: CellStats(
                rmse=float(np.sqrt(np.mean(good[:, j] ** 2))),
                bias=float(np.mean(good[:, j])),
            )
            for j, t in enumerate(TARGETS)
        }
    rate = None
    if tau0 is not None:
        flags = rejects[~np.isnan(rejects)]
        rate = float(np.mean(flags)) if flags.size else None
    return McReport(
        design=design,
        reps=reps,
        seed=seed,
        tau=spec.tau,
        failures=failures,
        cells=cells,
        rejection_rate=rate,
        tau0=tau0,
        alpha=alpha if tau0 is not None else None,
        errors={est: err[est] for est in estimators} if keep_errors else None,
    )


def rejection_rates(
    spec: DgpSpec,
    design: int,
    reps: int,
    tau0: float,
    alpha: float = 0.05,
    seed: int = 0,
    threads: int | None = None,
    exposure: ExposureVector | None = None,
) -> float:
    """Share of replications on which the test rejects tau = tau0."""
    report = run_monte_carlo(
        spec,
        design,
        reps,
        seed=seed,
        tau0=tau0,
        alpha=alpha,
        threads=threads,
        exposure=exposure,
    )
    if report.rejection_rate is None:
        raise MonteCarloUnstable("no replication produced a test outcome")
    return report.rejection_rate
